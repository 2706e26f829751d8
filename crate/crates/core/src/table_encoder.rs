//! Token sequence to initial relation table.
//!
//! `R[i][j] = linear_d( W1·(ha_i ⊕ ho_j) ⊕ ha_iᵀ W2 ho_j ⊕ maxpool(h[min(i,j)..=max(i,j)]) )`

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_bilinear: usize,
    pub d_prime: usize,
}

impl EncoderConfig {
    /// Bilinear width defaults to `ceil(sqrt(d))`.
    pub fn new(vocab_size: usize, d: usize, d_prime: usize) -> Self {
        Self {
            vocab_size,
            d,
            d_bilinear: default_bilinear_width(d),
            d_prime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d == 0 || self.d_bilinear == 0 || self.d_prime == 0 {
            return Err(Error::Config(format!("encoder widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Width of the uncompressed cell vector.
    pub fn raw_width(&self) -> usize {
        2 * self.d + self.d_bilinear
    }
}

pub fn default_bilinear_width(d: usize) -> usize {
    let mut k = (d as f64).sqrt() as usize;
    while k * k < d {
        k += 1;
    }
    k.max(1)
}

pub mod ids {
    pub const EMBEDDING: &str = "enc.embedding";
    pub const LINEAR_A_W: &str = "enc.linear_a.w";
    pub const LINEAR_A_B: &str = "enc.linear_a.b";
    pub const LINEAR_O_W: &str = "enc.linear_o.w";
    pub const LINEAR_O_B: &str = "enc.linear_o.b";
    pub const W1: &str = "enc.w1";
    pub const W2: &str = "enc.w2";
    pub const LINEAR_D_W: &str = "enc.linear_d.w";
    pub const LINEAR_D_B: &str = "enc.linear_d.b";
}

/// Registers encoder parameters with their documented shapes.
pub fn init_params(cfg: &EncoderConfig, store: &mut ParameterStore) -> Result<()> {
    cfg.validate()?;
    let (v, d, k, dp) = (cfg.vocab_size, cfg.d, cfg.d_bilinear, cfg.d_prime);
    store.init_uniform(ids::EMBEDDING, &[v, d])?;
    store.init_uniform(ids::LINEAR_A_W, &[d, d])?;
    store.init_zeros(ids::LINEAR_A_B, &[d])?;
    store.init_uniform(ids::LINEAR_O_W, &[d, d])?;
    store.init_zeros(ids::LINEAR_O_B, &[d])?;
    store.init_uniform(ids::W1, &[2 * d, d])?;
    store.init_uniform(ids::W2, &[d, k, d])?;
    store.init_uniform(ids::LINEAR_D_W, &[2 * d + k, dp])?;
    store.init_zeros(ids::LINEAR_D_B, &[dp])?;
    Ok(())
}

/// Maps token ids to hidden states `[n, d]`.
pub trait SentenceEncoder {
    fn encode(&self, g: &mut Graph, store: &ParameterStore, token_ids: &[usize]) -> Result<Var>;
}

/// Default encoder: a trainable lookup table.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmbeddingEncoder;

impl SentenceEncoder for EmbeddingEncoder {
    fn encode(&self, g: &mut Graph, store: &ParameterStore, token_ids: &[usize]) -> Result<Var> {
        let table = g.param(store, ids::EMBEDDING)?;
        g.embedding(table, token_ids)
    }
}

pub fn encode_sentence(g: &mut Graph, store: &ParameterStore, token_ids: &[usize]) -> Result<Var> {
    EmbeddingEncoder.encode(g, store, token_ids)
}

pub fn project_ao(g: &mut Graph, store: &ParameterStore, h: Var) -> Result<(Var, Var)> {
    let (wa, ba) = (g.param(store, ids::LINEAR_A_W)?, g.param(store, ids::LINEAR_A_B)?);
    let (wo, bo) = (g.param(store, ids::LINEAR_O_W)?, g.param(store, ids::LINEAR_O_B)?);
    let ha = g.linear(h, wa, Some(ba))?;
    let ho = g.linear(h, wo, Some(bo))?;
    Ok((ha, ho))
}

/// Raw cell vectors `[n, n, 2d + d_bilinear]`: concat term, bilinear term,
/// span max-pool term, in that order.
pub fn biaffine_table(g: &mut Graph, store: &ParameterStore, ha: Var, ho: Var, h: Var) -> Result<Var> {
    let d = g.shape(ha)[1];
    let w1 = g.param(store, ids::W1)?;
    if g.shape(w1) != [2 * d, d] {
        return Err(Error::Dimension {
            op: "biaffine W1",
            lhs: g.shape(w1).to_vec(),
            rhs: vec![2 * d, d],
        });
    }
    // W1 (ha_i ⊕ ho_j) = ha_i W1[..d] + ho_j W1[d..]
    let top = Arc::new((0..d).map(Some).collect::<Vec<_>>());
    let bottom = Arc::new((d..2 * d).map(Some).collect::<Vec<_>>());
    let w1a = g.gather(w1, top, &[d, d])?;
    let w1o = g.gather(w1, bottom, &[d, d])?;
    let a = g.linear(ha, w1a, None)?;
    let o = g.linear(ho, w1o, None)?;
    let concat_term = g.outer_sum(a, o)?;
    let w2 = g.param(store, ids::W2)?;
    let bilinear_term = g.bilinear(ha, ho, w2)?;
    let pool_term = g.span_max_pool(h)?;
    g.concat(&[concat_term, bilinear_term, pool_term])
}

/// Per-cell affine compression to `d_prime`.
pub fn compress(g: &mut Graph, store: &ParameterStore, raw: Var) -> Result<Var> {
    let (w, b) = (g.param(store, ids::LINEAR_D_W)?, g.param(store, ids::LINEAR_D_B)?);
    g.linear(raw, w, Some(b))
}

/// Full table encoding `[n, n, d_prime]` from token ids.
pub fn encode_table(g: &mut Graph, store: &ParameterStore, token_ids: &[usize]) -> Result<Var> {
    let h = encode_sentence(g, store, token_ids)?;
    let (ha, ho) = project_ao(g, store, h)?;
    let raw = biaffine_table(g, store, ha, ho, h)?;
    compress(g, store, raw)
}

/// Token string to id map; id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl Vocabulary {
    /// Builds a vocabulary from the sorted set of observed tokens.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<&str> = tokens.into_iter().filter(|t| *t != UNK).collect();
        set.sort_unstable();
        set.dedup();
        let mut all = vec![UNK.to_string()];
        all.extend(set.into_iter().map(str::to_string));
        Self::from_tokens(all)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
