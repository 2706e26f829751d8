//! Stripe attention over a block-partitioned table.
//!
//! A padded `n x n` table is cut into `l x l` blocks of side `b`. Blocks are
//! numbered row-major, and block `i` attends to the `w x w` window of blocks
//! at flattened offsets `r·l + c` (`|r|, |c| <= w/2`), wrapping modulo `l²`.
//! Every cell in a block shares that block's key set, so each query sees
//! exactly `w²b²` keys.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttnGroup, AttnLayout, Graph, ParameterStore, Tensor, Var};

/// How neighbor offsets wrap past the table edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WrapMode {
    /// `(i + r·l + c) mod l²` on the flattened block sequence.
    #[default]
    Flattened,
    /// `((row + r) mod l, (col + c) mod l)` on the block grid.
    Torus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeConfig {
    pub b: usize,
    pub w: usize,
    pub heads: usize,
    pub wrap: WrapMode,
}

impl StripeConfig {
    pub fn validate(&self, n_padded: usize, d_prime: usize) -> Result<()> {
        if self.b == 0 || n_padded % self.b != 0 {
            return Err(Error::Padding {
                n: n_padded,
                b: self.b,
            });
        }
        check_window(n_padded / self.b, self.w)?;
        if self.heads == 0 || d_prime % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_prime {d_prime} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

fn check_window(l: usize, w: usize) -> Result<()> {
    if w % 2 == 0 {
        return Err(Error::Config(format!("window width {w} must be odd")));
    }
    if w > l {
        return Err(Error::Config(format!(
            "window width {w} exceeds blocks per side {l}"
        )));
    }
    Ok(())
}

/// Partition of a padded table into `l²` square blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub n_padded: usize,
    pub b: usize,
    pub l: usize,
}

impl BlockGrid {
    pub fn new(n_padded: usize, b: usize) -> Result<Self> {
        if b == 0 || n_padded == 0 || n_padded % b != 0 {
            return Err(Error::Padding { n: n_padded, b });
        }
        Ok(Self {
            n_padded,
            b,
            l: n_padded / b,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.l * self.l
    }

    pub fn block_of(&self, row: usize, col: usize) -> usize {
        (row / self.b) * self.l + col / self.b
    }

    /// Flattened cell indices of block `id`, row-major inside the block.
    pub fn cells(&self, id: usize) -> Vec<usize> {
        let (br, bc) = (id / self.l, id % self.l);
        let mut out = Vec::with_capacity(self.b * self.b);
        for r in br * self.b..(br + 1) * self.b {
            for c in bc * self.b..(bc + 1) * self.b {
                out.push(r * self.n_padded + c);
            }
        }
        out
    }
}

/// Block ids in the `w x w` window of block `i`, ordered by row offset then
/// column offset.
pub fn neighbor_indices(i: usize, l: usize, w: usize, wrap: WrapMode) -> Result<Vec<usize>> {
    check_window(l, w)?;
    let total = l * l;
    if i >= total {
        return Err(Error::Index {
            what: "block id",
            index: i,
            bound: total,
        });
    }
    let h = (w / 2) as isize;
    let (l_i, total_i) = (l as isize, total as isize);
    let mut out = Vec::with_capacity(w * w);
    for r in -h..=h {
        for c in -h..=h {
            let j = match wrap {
                WrapMode::Flattened => (i as isize + r * l_i + c).rem_euclid(total_i),
                WrapMode::Torus => {
                    let row = (i as isize / l_i + r).rem_euclid(l_i);
                    let col = (i as isize % l_i + c).rem_euclid(l_i);
                    row * l_i + col
                }
            };
            out.push(j as usize);
        }
    }
    Ok(out)
}

/// Dense token-pair mask: `mask[q * N + k]` with `N = n_padded²`.
pub fn build_stripe_mask(n_padded: usize, b: usize, w: usize, wrap: WrapMode) -> Result<Vec<bool>> {
    let grid = BlockGrid::new(n_padded, b)?;
    let nb = grid.num_blocks();
    let mut allowed = vec![false; nb * nb];
    for i in 0..nb {
        for j in neighbor_indices(i, grid.l, w, wrap)? {
            allowed[i * nb + j] = true;
        }
    }
    let cells = n_padded * n_padded;
    let block: Vec<usize> = (0..cells)
        .map(|c| grid.block_of(c / n_padded, c % n_padded))
        .collect();
    let mut mask = vec![false; cells * cells];
    for q in 0..cells {
        let bq = block[q];
        for k in 0..cells {
            mask[q * cells + k] = allowed[bq * nb + block[k]];
        }
    }
    Ok(mask)
}

/// Gather layout: one group per block, keys = cells of the neighbor blocks.
pub fn stripe_layout(n_padded: usize, b: usize, w: usize, wrap: WrapMode) -> Result<AttnLayout> {
    let grid = BlockGrid::new(n_padded, b)?;
    let groups = (0..grid.num_blocks())
        .map(|i| {
            let keys = neighbor_indices(i, grid.l, w, wrap)?
                .into_iter()
                .flat_map(|j| grid.cells(j))
                .collect();
            Ok(AttnGroup {
                queries: grid.cells(i),
                keys,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttnLayout::Groups(Arc::new(groups)))
}

/// Exact multiply-accumulate counts for attention scores and value mixing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub score_macs: u64,
    pub value_macs: u64,
}

impl FlopLedger {
    pub fn add(&mut self, other: FlopLedger) {
        self.score_macs += other.score_macs;
        self.value_macs += other.value_macs;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Stripe,
    Full,
}

/// MAC counts summed over heads; `d_prime = heads · d_head`.
///
/// The total does not depend on the head count (heads split `d_prime`); it
/// is accepted so callers can pass a full attention config.
pub fn flops(n_padded: usize, b: usize, w: usize, heads: usize, d_prime: usize, mode: AttentionMode) -> Result<FlopLedger> {
    if heads == 0 || d_prime % heads != 0 {
        return Err(Error::Config(format!("d_prime {d_prime} not divisible by {heads} heads")));
    }
    let queries = (n_padded * n_padded) as u64;
    let keys = match mode {
        AttentionMode::Stripe => {
            BlockGrid::new(n_padded, b)?;
            check_window(n_padded / b, w)?;
            (w * w * b * b) as u64
        }
        AttentionMode::Full => queries,
    };
    let macs = queries * keys * d_prime as u64;
    Ok(FlopLedger {
        score_macs: macs,
        value_macs: macs,
    })
}

/// Parameter ids for one multi-head attention block.
#[derive(Clone, Debug)]
pub struct AttnParamIds {
    pub q_w: String,
    pub q_b: String,
    pub k_w: String,
    pub k_b: String,
    pub v_w: String,
    pub v_b: String,
    pub o_w: String,
    pub o_b: String,
}

impl AttnParamIds {
    pub fn new(prefix: &str) -> Self {
        let id = |s: &str| format!("{prefix}.{s}");
        Self {
            q_w: id("q.w"),
            q_b: id("q.b"),
            k_w: id("k.w"),
            k_b: id("k.b"),
            v_w: id("v.w"),
            v_b: id("v.b"),
            o_w: id("o.w"),
            o_b: id("o.b"),
        }
    }

    pub fn init(&self, d_prime: usize, store: &mut ParameterStore) -> Result<()> {
        for (w, b) in [
            (&self.q_w, &self.q_b),
            (&self.k_w, &self.k_b),
            (&self.v_w, &self.v_b),
            (&self.o_w, &self.o_b),
        ] {
            store.init_uniform(w, &[d_prime, d_prime])?;
            store.init_zeros(b, &[d_prime])?;
        }
        Ok(())
    }
}

/// Projects `x` to Q/K/V, runs attention under `layout`, applies the output
/// projection. `x` is `[rows, cols, d']` or `[N, d']`; the shape is kept.
fn mha(g: &mut Graph, store: &ParameterStore, x: Var, ids: &AttnParamIds, heads: usize, layout: AttnLayout) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let dp = *shape.last().unwrap();
    let n: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[n, dp])?;
    let proj = |w: &str, b: &str, g: &mut Graph| -> Result<Var> {
        let (w, b) = (g.param(store, w)?, g.param(store, b)?);
        g.linear(flat, w, Some(b))
    };
    let q = proj(&ids.q_w, &ids.q_b, g)?;
    let k = proj(&ids.k_w, &ids.k_b, g)?;
    let v = proj(&ids.v_w, &ids.v_b, g)?;
    let att = g.attention(q, k, v, heads, layout)?;
    let out = proj_out(g, store, att, ids)?;
    g.reshape(out, &shape)
}

fn proj_out(g: &mut Graph, store: &ParameterStore, att: Var, ids: &AttnParamIds) -> Result<Var> {
    let (w, b) = (g.param(store, &ids.o_w)?, g.param(store, &ids.o_b)?);
    g.linear(att, w, Some(b))
}

fn table_side(g: &Graph, x: Var) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::Dimension {
            op: "attention table",
            lhs: s.to_vec(),
            rhs: vec![s[0], s[0], s[s.len() - 1]],
        });
    }
    Ok((s[0], s[2]))
}

/// Stripe attention over a padded `[n, n, d']` table.
pub fn stripe_attention_forward(
    g: &mut Graph,
    store: &ParameterStore,
    x: Var,
    ids: &AttnParamIds,
    cfg: &StripeConfig,
    ledger: &mut FlopLedger,
) -> Result<Var> {
    let (n, dp) = table_side(g, x)?;
    cfg.validate(n, dp)?;
    let layout = stripe_layout(n, cfg.b, cfg.w, cfg.wrap)?;
    let out = mha(g, store, x, ids, cfg.heads, layout)?;
    ledger.add(flops(n, cfg.b, cfg.w, cfg.heads, dp, AttentionMode::Stripe)?);
    Ok(out)
}

/// Same as [`stripe_attention_forward`] with a prebuilt layout (layouts only
/// depend on the table side, so callers may cache them).
pub fn stripe_attention_with_layout(
    g: &mut Graph,
    store: &ParameterStore,
    x: Var,
    ids: &AttnParamIds,
    cfg: &StripeConfig,
    layout: AttnLayout,
    ledger: &mut FlopLedger,
) -> Result<Var> {
    let (n, dp) = table_side(g, x)?;
    cfg.validate(n, dp)?;
    let out = mha(g, store, x, ids, cfg.heads, layout)?;
    ledger.add(flops(n, cfg.b, cfg.w, cfg.heads, dp, AttentionMode::Stripe)?);
    Ok(out)
}

/// Dense attention over the flattened table with an optional token mask.
pub fn full_attention_forward(
    g: &mut Graph,
    store: &ParameterStore,
    x: Var,
    ids: &AttnParamIds,
    heads: usize,
    mask: Option<Arc<Vec<bool>>>,
    ledger: &mut FlopLedger,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let dp = *shape.last().unwrap();
    let n_tokens: usize = shape[..shape.len() - 1].iter().product();
    let out = mha(g, store, x, ids, heads, AttnLayout::Dense { mask })?;
    let macs = (n_tokens * n_tokens * dp) as u64;
    ledger.add(FlopLedger {
        score_macs: macs,
        value_macs: macs,
    });
    Ok(out)
}

/// Source index for each output cell: `out[r][c] = x[(r+s) mod n][(c+s) mod n]`.
pub fn shift_sources(n: usize, s: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            v.push(((r + s) % n) * n + (c + s) % n);
        }
    }
    v
}

/// Source index for the inverse shift.
pub fn unshift_sources(n: usize, s: usize) -> Vec<usize> {
    let s = s % n;
    shift_sources(n, (n - s) % n)
}

fn permute(g: &mut Graph, x: Var, sources: Vec<usize>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    g.gather(x, Arc::new(sources.into_iter().map(Some).collect()), &shape)
}

/// Cyclic shift of the whole table toward the upper left by `s` cells.
pub fn loop_shift(g: &mut Graph, x: Var, s: usize) -> Result<Var> {
    let (n, _) = table_side(g, x)?;
    permute(g, x, shift_sources(n, s % n))
}

/// Inverse of [`loop_shift`].
pub fn loop_unshift(g: &mut Graph, x: Var, s: usize) -> Result<Var> {
    let (n, _) = table_side(g, x)?;
    permute(g, x, unshift_sources(n, s))
}

/// Tensor-level shift for use outside a graph.
pub fn loop_shift_tensor(x: &Tensor, s: usize) -> Tensor {
    permute_tensor(x, &shift_sources(x.shape()[0], s % x.shape()[0]))
}

pub fn loop_unshift_tensor(x: &Tensor, s: usize) -> Tensor {
    permute_tensor(x, &unshift_sources(x.shape()[0], s))
}

fn permute_tensor(x: &Tensor, sources: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(x.numel());
    for &s in sources {
        out.extend_from_slice(x.row(s));
    }
    Tensor::new(x.shape().to_vec(), out).expect("permutation preserves shape")
}

/// Original-coordinate cells that share a block with original cell `(r, c)`
/// after the table has been shifted by `s` (s = 0 gives the plain partition).
pub fn block_mates(grid: &BlockGrid, r: usize, c: usize, s: usize) -> BTreeSet<(usize, usize)> {
    let n = grid.n_padded;
    // shifted position of (r, c)
    let (sr, sc) = ((r + n - s % n) % n, (c + n - s % n) % n);
    let block = grid.block_of(sr, sc);
    grid.cells(block)
        .into_iter()
        .map(|cell| {
            let (pr, pc) = (cell / n, cell % n);
            ((pr + s) % n, (pc + s) % n)
        })
        .collect()
}
