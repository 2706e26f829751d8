use crate::decoder::{self, Extracted, VertexPredictions};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Var};
use crate::stripe_attention::FlopLedger;
use crate::table_encoder::{self, Vocabulary};
use crate::tagging::{encode_labels, SentenceRecord};
use crate::tt_encoder;

use super::RunConfig;

/// Parameters plus the config and vocabulary they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
}

/// Loss terms of one sentence.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub vertex: Var,
    pub sentiment: Var,
    pub num_candidates: usize,
}

/// Result of one forward/backward pass: loss values and parameter gradients
/// keyed by store index.
#[derive(Clone, Debug)]
pub struct SentenceGrads {
    pub loss: f64,
    pub vertex_loss: f64,
    pub sentiment_loss: f64,
    pub grads: Vec<(usize, Vec<f64>)>,
    pub ledger: FlopLedger,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new(config.seed);
        store.set_scheme(config.init);
        table_encoder::init_params(&config.encoder(vocab.len()), &mut store)?;
        tt_encoder::init_params(&config.tt(), &mut store)?;
        decoder::init_params(config.d_prime, config.task, &mut store)?;
        Ok(Self { config, vocab, store })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Relation table `[n, n, d']` after the relation encoder.
    pub fn relation_table(&self, g: &mut Graph, tokens: &[String], ledger: &mut FlopLedger) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty sentence".into()));
        }
        let ids = self.vocab.encode(tokens);
        let r = table_encoder::encode_table(g, &self.store, &ids)?;
        tt_encoder::relation_encode(g, &self.store, r, &self.config.tt(), ledger)
    }

    /// Builds the total training loss for one labelled sentence.
    pub fn loss(&self, g: &mut Graph, record: &SentenceRecord, ledger: &mut FlopLedger) -> Result<LossVars> {
        let labels = encode_labels(record)?;
        let r_final = self.relation_table(g, &record.tokens, ledger)?;
        let preds = decoder::predict_vertices(g, &self.store, r_final)?;
        let vertex = decoder::vertex_loss(g, &preds, &labels, self.config.pos_weight)?;
        let cands = decoder::training_candidates(
            &decoder::vertex_cells(g.value(preds.p_tl)),
            &decoder::vertex_cells(g.value(preds.p_br)),
            &labels.regions,
            self.config.max_candidates,
        );
        let logits = if cands.is_empty() {
            None
        } else {
            let repr = decoder::rectangle_repr(g, r_final, &cands)?;
            Some(decoder::sentiment_logits(g, &self.store, repr)?)
        };
        let targets = decoder::candidate_labels(&cands, &labels.regions, self.config.task);
        let sentiment = decoder::sentiment_loss(g, logits, &targets)?;
        let total = decoder::total_loss(g, vertex, sentiment)?;
        Ok(LossVars {
            total,
            vertex,
            sentiment,
            num_candidates: cands.len(),
        })
    }

    /// Forward and backward for one sentence.
    pub fn sentence_grads(&self, record: &SentenceRecord) -> Result<SentenceGrads> {
        let mut g = Graph::new();
        let mut ledger = FlopLedger::default();
        let l = self.loss(&mut g, record, &mut ledger)?;
        let grads = g.backward(l.total)?;
        let mut out = Vec::new();
        for (id, grad) in g.param_grads(&grads) {
            out.push((self.store.index_of(id)?, grad.to_vec()));
        }
        Ok(SentenceGrads {
            loss: g.scalar(l.total),
            vertex_loss: g.scalar(l.vertex),
            sentiment_loss: g.scalar(l.sentiment),
            grads: out,
            ledger,
        })
    }

    /// Vertex logits, candidate rectangles and their classification.
    pub fn predict(&self, tokens: &[String]) -> Result<Vec<Extracted>> {
        let mut g = Graph::new();
        let mut ledger = FlopLedger::default();
        let r_final = self.relation_table(&mut g, tokens, &mut ledger)?;
        let VertexPredictions { p_tl, p_br } = decoder::predict_vertices(&mut g, &self.store, r_final)?;
        let cands = decoder::enumerate_candidates(
            &decoder::vertex_cells(g.value(p_tl)),
            &decoder::vertex_cells(g.value(p_br)),
            self.config.max_candidates,
        );
        if cands.is_empty() {
            return Ok(Vec::new());
        }
        let repr = decoder::rectangle_repr(&mut g, r_final, &cands)?;
        let logits = decoder::sentiment_logits(&mut g, &self.store, repr)?;
        Ok(decoder::extract_triplets(&cands, g.value(logits), self.config.task))
    }
}
