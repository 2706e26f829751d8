use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::decoder::{Task, DEFAULT_MAX_CANDIDATES};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, InitScheme};
use crate::stripe_attention::{AttentionMode, WrapMode};
use crate::table_encoder::{default_bilinear_width, EncoderConfig};
use crate::tt_encoder::{GateMode, TTConfig};

/// Everything needed to reproduce a run. Field names double as JSON keys and
/// (kebab-cased) CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    /// Bilinear width; `None` picks `ceil(sqrt(d))`.
    pub d_bilinear: Option<usize>,
    pub d_prime: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub num_layers: usize,
    pub b: usize,
    pub w: usize,
    pub attention: AttentionMode,
    pub loop_shift: bool,
    pub wrap: WrapMode,
    pub gate: GateMode,
    /// False bypasses the layer stack so the decoder sees the conv output.
    pub tt_enabled: bool,
    pub init: InitScheme,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub task: Task,
    /// Loss weight of vertex cells relative to empty cells.
    pub pos_weight: f64,
    pub max_candidates: usize,
    /// Training corpus; a synthetic corpus is generated when absent.
    pub train_path: Option<PathBuf>,
    /// Dev/test corpora; when absent they are split off the training corpus.
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            d: 32,
            d_bilinear: None,
            d_prime: 48,
            heads: 4,
            ffn_width: 96,
            num_layers: 2,
            b: 2,
            w: 3,
            attention: AttentionMode::Stripe,
            loop_shift: true,
            wrap: WrapMode::Flattened,
            gate: GateMode::Scalar,
            tt_enabled: true,
            init: InitScheme::Glorot,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            epochs: 15,
            batch_size: 4,
            seed: 13,
            task: Task::Aste,
            pos_weight: 1.0,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            train_path: None,
            dev_path: None,
            test_path: None,
            checkpoint_path: None,
            log_path: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the long-distance corpus. One pair per sentence makes
    /// vertex cells rarer, hence the heavier vertex weight; the corpus is
    /// smaller, hence smaller batches and fewer epochs.
    pub fn long_distance() -> Self {
        Self {
            batch_size: 2,
            pos_weight: 4.0,
            epochs: 10,
            synth: SynthConfig::long_distance(SynthConfig::default().seed),
            ..Self::default()
        }
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn d_bilinear(&self) -> usize {
        self.d_bilinear.unwrap_or_else(|| default_bilinear_width(self.d))
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d: self.d,
            d_bilinear: self.d_bilinear(),
            d_prime: self.d_prime,
        }
    }

    pub fn tt(&self) -> TTConfig {
        TTConfig {
            num_layers: self.num_layers,
            d_prime: self.d_prime,
            heads: self.heads,
            ffn_width: self.ffn_width,
            b: self.b,
            w: self.w,
            wrap: self.wrap,
            attention: self.attention,
            loop_shift: self.loop_shift,
            gate: self.gate,
            enabled: self.tt_enabled,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.encoder(1).validate()?;
        self.tt().validate()?;
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.max_candidates == 0 {
            return err("max_candidates must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return err("eps must be positive and weight_decay non-negative".into());
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return err("pos_weight must be positive".into());
        }
        if self.train_path.is_none() {
            self.synth.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.d_bilinear(), 6);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"b": 4, "attention": "full", "task": "aope"}"#).unwrap();
        assert_eq!(c.b, 4);
        assert_eq!(c.attention, AttentionMode::Full);
        assert_eq!(c.task, Task::Aope);
        assert_eq!(c.d, 32);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        for c in [
            RunConfig { w: 2, ..Default::default() },
            RunConfig { heads: 5, ..Default::default() },
            RunConfig { num_layers: 3, ..Default::default() },
            RunConfig { batch_size: 0, ..Default::default() },
            RunConfig { lr: -1.0, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
