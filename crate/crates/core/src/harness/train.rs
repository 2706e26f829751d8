use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, generate_synthetic, Split};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, OptimizerState};
use crate::par;
use crate::stripe_attention::FlopLedger;
use crate::table_encoder::Vocabulary;
use crate::tagging::SentenceRecord;

use super::{evaluate, Model, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_vertex_loss: f64,
    pub mean_sentiment_loss: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
    pub dev_exact_match: f64,
    pub ledger: FlopLedger,
    /// Wall time of the epoch including dev evaluation; the only field that
    /// varies between identical runs.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch of the kept checkpoint; `None` means the initialization.
    pub best_epoch: Option<usize>,
    pub best_dev_f1: f64,
}

impl TrainLog {
    /// The log with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut l = self.clone();
        l.epochs.iter_mut().for_each(|e| e.wall_ms = 0.0);
        l
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Loads the corpora named in the config, or generates the synthetic one, and
/// splits off dev/test where no file is given.
pub fn load_split(cfg: &RunConfig) -> Result<Split> {
    let corpus = match &cfg.train_path {
        Some(p) => data::load_corpus(p)?,
        None => generate_synthetic(&cfg.synth)?,
    };
    let mut split = corpus.split();
    if cfg.dev_path.is_some() || cfg.test_path.is_some() {
        split.train = corpus.records;
    }
    if let Some(p) = &cfg.dev_path {
        split.dev = data::load_corpus(p)?.records;
    }
    if let Some(p) = &cfg.test_path {
        split.test = data::load_corpus(p)?.records;
    }
    Ok(split)
}

pub fn build_vocab(records: &[SentenceRecord]) -> Vocabulary {
    Vocabulary::build(records.iter().flat_map(|r| r.tokens.iter().map(String::as_str)))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub vertex_loss: f64,
    pub sentiment_loss: f64,
    pub ledger: FlopLedger,
}

/// One optimizer step on the mean loss of `batch`. Sentences are processed
/// in parallel and their gradients summed in batch order.
pub fn train_step(model: &mut Model, state: &mut OptimizerState, batch: &[SentenceRecord]) -> Result<BatchStats> {
    let outs = par::map(batch, |r| model.sentence_grads(r));
    let scale = 1.0 / batch.len() as f64;
    model.store.zero_grads();
    let mut stats = BatchStats::default();
    for out in outs {
        let out = out?;
        for (idx, g) in &out.grads {
            model.store.add_grad_at(*idx, g, scale)?;
        }
        stats.loss += out.loss * scale;
        stats.vertex_loss += out.vertex_loss * scale;
        stats.sentiment_loss += out.sentiment_loss * scale;
        stats.ledger.add(out.ledger);
    }
    adamw_step(&mut model.store, state)?;
    Ok(stats)
}

/// Minibatch AdamW over the training split; after each epoch the dev split
/// is scored and the best-F1 parameters are kept.
pub fn train(cfg: &RunConfig, split: &Split) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data {
            line: 0,
            msg: "training split is empty".into(),
        });
    }
    let model = Model::new(cfg.clone(), build_vocab(&split.train))?;
    train_model(model, &split.train, &split.dev)
}

pub fn train_model(mut model: Model, train: &[SentenceRecord], dev: &[SentenceRecord]) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let mut state = OptimizerState::new(cfg.adamw(), &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best = model.store.clone();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss, mut vl, mut sl) = (0.0, 0.0, 0.0);
        let mut ledger = FlopLedger::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SentenceRecord> = chunk.iter().map(|&i| train[i].clone()).collect();
            let s = train_step(&mut model, &mut state, &batch)?;
            loss += s.loss;
            vl += s.vertex_loss;
            sl += s.sentiment_loss;
            ledger.add(s.ledger);
            batches += 1;
        }
        let report = evaluate(&model, dev)?;
        let nb = batches as f64;
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss / nb,
            mean_vertex_loss: vl / nb,
            mean_sentiment_loss: sl / nb,
            dev_precision: report.triplet_precision,
            dev_recall: report.triplet_recall,
            dev_f1: report.triplet_f1,
            dev_exact_match: report.sentence_exact_match_rate,
            ledger,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        // Without a dev split the latest parameters win.
        if log.best_epoch.is_none() || report.triplet_f1 > log.best_dev_f1 || dev.is_empty() {
            log.best_epoch = Some(epoch);
            log.best_dev_f1 = report.triplet_f1;
            best = model.store.clone();
        }
    }
    model.store = best;
    model.store.zero_grads();
    Ok(TrainOutcome { model, log })
}
