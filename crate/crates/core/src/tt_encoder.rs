//! Relation encoder: 3x3 convolution, an even stack of pre-norm transformer
//! layers using stripe attention with alternating loop shifts, and a gated
//! residual back to the convolution output.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, Graph, ParameterStore, Var};
use crate::stripe_attention::{
    full_attention_forward, loop_shift, loop_unshift, stripe_attention_with_layout, stripe_layout,
    AttentionMode, AttnParamIds, FlopLedger, StripeConfig, WrapMode,
};
use crate::tagging::pad_length;

/// Shape of the residual gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Scalar,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTConfig {
    pub num_layers: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub b: usize,
    pub w: usize,
    pub wrap: WrapMode,
    pub attention: AttentionMode,
    pub loop_shift: bool,
    pub gate: GateMode,
    /// When false the layer stack and gate are skipped and the encoder
    /// returns the convolution output unchanged.
    pub enabled: bool,
}

impl TTConfig {
    pub fn new(d_prime: usize, heads: usize, b: usize, w: usize) -> Self {
        Self {
            num_layers: 2,
            d_prime,
            heads,
            ffn_width: 4 * d_prime,
            b,
            w,
            wrap: WrapMode::Flattened,
            attention: AttentionMode::Stripe,
            loop_shift: true,
            gate: GateMode::Scalar,
            enabled: true,
        }
    }

    /// Loop-shift distance `floor(b / 2)`.
    pub fn shift(&self) -> usize {
        self.b / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 || self.num_layers % 2 != 0 {
            return Err(Error::Config(format!(
                "num_layers must be even and >= 2, got {}",
                self.num_layers
            )));
        }
        if self.ffn_width < self.d_prime {
            return Err(Error::Config(format!(
                "ffn_width {} < d_prime {}",
                self.ffn_width, self.d_prime
            )));
        }
        if self.b == 0 {
            return Err(Error::Config("block width must be positive".into()));
        }
        if self.w % 2 == 0 {
            return Err(Error::Config(format!("window width {} must be odd", self.w)));
        }
        if self.heads == 0 || self.d_prime % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_prime {} not divisible by {} heads",
                self.d_prime, self.heads
            )));
        }
        Ok(())
    }

    pub fn stripe(&self) -> StripeConfig {
        StripeConfig {
            b: self.b,
            w: self.w,
            heads: self.heads,
            wrap: self.wrap,
        }
    }

    /// Padded table side for a sentence of `n` tokens: a multiple of `b`
    /// with at least `w` blocks per side.
    pub fn padded_len(&self, n: usize) -> usize {
        pad_length(n, self.b).max(self.w * self.b)
    }
}

pub mod ids {
    pub const CONV_W: &str = "tt.conv.w";
    pub const CONV_B: &str = "tt.conv.b";
    pub const GATE: &str = "tt.gate";

    pub fn layer(i: usize, name: &str) -> String {
        format!("tt.l{i}.{name}")
    }
}

/// Parameter ids for one transformer layer.
#[derive(Clone, Debug)]
pub struct TTLayerParams {
    pub attn: AttnParamIds,
    pub ln1_g: String,
    pub ln1_b: String,
    pub ln2_g: String,
    pub ln2_b: String,
    pub ffn1_w: String,
    pub ffn1_b: String,
    pub ffn2_w: String,
    pub ffn2_b: String,
}

impl TTLayerParams {
    pub fn new(i: usize) -> Self {
        let id = |s| ids::layer(i, s);
        Self {
            attn: AttnParamIds::new(&id("attn")),
            ln1_g: id("ln1.g"),
            ln1_b: id("ln1.b"),
            ln2_g: id("ln2.g"),
            ln2_b: id("ln2.b"),
            ffn1_w: id("ffn1.w"),
            ffn1_b: id("ffn1.b"),
            ffn2_w: id("ffn2.w"),
            ffn2_b: id("ffn2.b"),
        }
    }

    fn init(&self, cfg: &TTConfig, store: &mut ParameterStore) -> Result<()> {
        let (dp, f) = (cfg.d_prime, cfg.ffn_width);
        self.attn.init(dp, store)?;
        store.init_const(&self.ln1_g, &[dp], 1.0)?;
        store.init_zeros(&self.ln1_b, &[dp])?;
        store.init_const(&self.ln2_g, &[dp], 1.0)?;
        store.init_zeros(&self.ln2_b, &[dp])?;
        store.init_uniform(&self.ffn1_w, &[dp, f])?;
        store.init_zeros(&self.ffn1_b, &[f])?;
        store.init_uniform(&self.ffn2_w, &[f, dp])?;
        store.init_zeros(&self.ffn2_b, &[dp])?;
        Ok(())
    }

    /// Ids of the weights that feed the residual branches (projections and
    /// FFN), excluding layer-norm parameters.
    pub fn branch_ids(&self) -> Vec<&str> {
        let a = &self.attn;
        vec![
            &a.q_w, &a.q_b, &a.k_w, &a.k_b, &a.v_w, &a.v_b, &a.o_w, &a.o_b, &self.ffn1_w,
            &self.ffn1_b, &self.ffn2_w, &self.ffn2_b,
        ]
    }
}

/// Registers the convolution, all layers and the residual gate.
pub fn init_params(cfg: &TTConfig, store: &mut ParameterStore) -> Result<()> {
    cfg.validate()?;
    let dp = cfg.d_prime;
    store.init_uniform(ids::CONV_W, &[3, 3, dp, dp])?;
    store.init_zeros(ids::CONV_B, &[dp])?;
    if !cfg.enabled {
        return Ok(());
    }
    for i in 0..cfg.num_layers {
        TTLayerParams::new(i).init(cfg, store)?;
    }
    let gate_shape = match cfg.gate {
        GateMode::Scalar => 1,
        GateMode::Channel => dp,
    };
    store.init_zeros(ids::GATE, &[gate_shape])?;
    Ok(())
}

pub fn conv3_forward(g: &mut Graph, store: &ParameterStore, r: Var) -> Result<Var> {
    let (w, b) = (g.param(store, ids::CONV_W)?, g.param(store, ids::CONV_B)?);
    g.conv3(r, w, b)
}

/// Zero-pads an `[n, n, c]` table to `[n_padded, n_padded, c]`.
pub fn pad_table(g: &mut Graph, x: Var, n_padded: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c) = (s[0], s[2]);
    if n == n_padded {
        return Ok(x);
    }
    let idx = (0..n_padded * n_padded)
        .map(|cell| {
            let (r, col) = (cell / n_padded, cell % n_padded);
            (r < n && col < n).then_some(r * n + col)
        })
        .collect();
    g.gather(x, Arc::new(idx), &[n_padded, n_padded, c])
}

/// Crops a padded table back to its leading `[n, n, c]` corner.
pub fn unpad_table(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (np, c) = (s[0], s[2]);
    if n == np {
        return Ok(x);
    }
    let idx = (0..n * n).map(|cell| Some((cell / n) * np + cell % n)).collect();
    g.gather(x, Arc::new(idx), &[n, n, c])
}

/// Attention wiring reused across layers of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerContext {
    layout: Option<AttnLayout>,
}

impl LayerContext {
    pub fn new(cfg: &TTConfig, n_padded: usize) -> Result<Self> {
        let layout = match cfg.attention {
            AttentionMode::Stripe => {
                cfg.stripe().validate(n_padded, cfg.d_prime)?;
                Some(stripe_layout(n_padded, cfg.b, cfg.w, cfg.wrap)?)
            }
            AttentionMode::Full => None,
        };
        Ok(Self { layout })
    }
}

/// One pre-norm layer followed by the layer's loop-shift step.
pub fn tt_layer_forward(
    g: &mut Graph,
    store: &ParameterStore,
    x: Var,
    cfg: &TTConfig,
    layer_index: usize,
    ctx: &LayerContext,
    ledger: &mut FlopLedger,
) -> Result<Var> {
    if layer_index >= cfg.num_layers {
        return Err(Error::Index {
            what: "layer",
            index: layer_index,
            bound: cfg.num_layers,
        });
    }
    let p = TTLayerParams::new(layer_index);
    let (g1, b1) = (g.param(store, &p.ln1_g)?, g.param(store, &p.ln1_b)?);
    let normed = g.layer_norm(x, g1, b1)?;
    let att = match &ctx.layout {
        Some(layout) => {
            stripe_attention_with_layout(g, store, normed, &p.attn, &cfg.stripe(), layout.clone(), ledger)?
        }
        None => full_attention_forward(g, store, normed, &p.attn, cfg.heads, None, ledger)?,
    };
    let y = g.add(x, att)?;

    let (g2, b2) = (g.param(store, &p.ln2_g)?, g.param(store, &p.ln2_b)?);
    let normed = g.layer_norm(y, g2, b2)?;
    let (w1, bb1) = (g.param(store, &p.ffn1_w)?, g.param(store, &p.ffn1_b)?);
    let hidden = g.linear(normed, w1, Some(bb1))?;
    let hidden = g.gelu(hidden);
    let (w2, bb2) = (g.param(store, &p.ffn2_w)?, g.param(store, &p.ffn2_b)?);
    let ffn = g.linear(hidden, w2, Some(bb2))?;
    let z = g.add(y, ffn)?;

    if !cfg.loop_shift {
        return Ok(z);
    }
    if layer_index % 2 == 0 {
        loop_shift(g, z, cfg.shift())
    } else {
        loop_unshift(g, z, cfg.shift())
    }
}

/// Runs every layer on a padded table. Output is in unshifted coordinates.
pub fn tt_forward(g: &mut Graph, store: &ParameterStore, r0: Var, cfg: &TTConfig, ledger: &mut FlopLedger) -> Result<Var> {
    cfg.validate()?;
    let n_padded = g.shape(r0)[0];
    if n_padded % cfg.b != 0 {
        return Err(Error::Padding {
            n: n_padded,
            b: cfg.b,
        });
    }
    let ctx = LayerContext::new(cfg, n_padded)?;
    let mut x = r0;
    for i in 0..cfg.num_layers {
        x = tt_layer_forward(g, store, x, cfg, i, &ctx, ledger)?;
    }
    Ok(x)
}

/// `g · RN + (1 − g) · R0` with `g = sigmoid(gate logit)`.
pub fn weighted_residual(g: &mut Graph, store: &ParameterStore, rn: Var, r0: Var) -> Result<Var> {
    let logit = g.param(store, ids::GATE)?;
    g.gate(rn, r0, logit)
}

/// Conv front, padding, layer stack, cropping and gated residual.
pub fn relation_encode(g: &mut Graph, store: &ParameterStore, r: Var, cfg: &TTConfig, ledger: &mut FlopLedger) -> Result<Var> {
    let r0 = conv3_forward(g, store, r)?;
    if !cfg.enabled {
        return Ok(r0);
    }
    let n = g.shape(r0)[0];
    let padded = pad_table(g, r0, cfg.padded_len(n))?;
    let rn = tt_forward(g, store, padded, cfg, ledger)?;
    let rn = unpad_table(g, rn, n)?;
    weighted_residual(g, store, rn, r0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::stripe_attention::loop_shift_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg() -> TTConfig {
        TTConfig {
            ffn_width: 8,
            ..TTConfig::new(4, 2, 2, 1)
        }
    }

    fn zero_branches(cfg: &TTConfig, store: &mut ParameterStore) {
        for i in 0..cfg.num_layers {
            for id in TTLayerParams::new(i).branch_ids() {
                let shape = store.value(id).unwrap().shape().to_vec();
                store.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
    }

    #[test]
    fn config_rejects_odd_layers_and_narrow_ffn() {
        let mut c = cfg();
        c.num_layers = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.ffn_width = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn conv_identity_kernel_and_loop_oracle() {
        let c = cfg();
        let mut store = ParameterStore::new(4);
        init_params(&c, &mut store).unwrap();
        let x = random(1, &[5, 5, 4]);

        // delta at the centre tap
        let mut k = Tensor::zeros(&[3, 3, 4, 4]);
        for ch in 0..4 {
            k.data_mut()[(4 * 4 + ch) * 4 + ch] = 1.0;
        }
        let mut s2 = store.clone();
        s2.set_value(ids::CONV_W, k).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = conv3_forward(&mut g, &s2, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let mut bias = Tensor::zeros(&[4]);
        bias.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        store.set_value(ids::CONV_B, bias.clone()).unwrap();
        for n in 1..=5 {
            let x = random(n as u64, &[n, n, 4]);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = conv3_forward(&mut g, &store, xv).unwrap();
            assert_eq!(g.shape(y), &[n, n, 4]);
            let w = store.value(ids::CONV_W).unwrap().data();
            for r in 0..n {
                for c in 0..n {
                    for co in 0..4 {
                        let mut acc = bias.data()[co];
                        for dr in 0..3 {
                            for dc in 0..3 {
                                let (ir, ic) = (r as isize + dr as isize - 1, c as isize + dc as isize - 1);
                                if ir < 0 || ic < 0 || ir >= n as isize || ic >= n as isize {
                                    continue;
                                }
                                for ci in 0..4 {
                                    acc += x.data()[((ir as usize) * n + ic as usize) * 4 + ci]
                                        * w[((dr * 3 + dc) * 4 + ci) * 4 + co];
                                }
                            }
                        }
                        assert!((g.value(y).data()[(r * n + c) * 4 + co] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_branch_layers_pass_through_with_shift() {
        let c = cfg();
        let mut store = ParameterStore::new(8);
        init_params(&c, &mut store).unwrap();
        zero_branches(&c, &mut store);
        let x = random(2, &[4, 4, 4]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let ctx = LayerContext::new(&c, 4).unwrap();
        let mut ledger = FlopLedger::default();
        let one = tt_layer_forward(&mut g, &store, xv, &c, 0, &ctx, &mut ledger).unwrap();
        assert_eq!(g.value(one), &loop_shift_tensor(&x, c.shift()));
        let two = tt_layer_forward(&mut g, &store, one, &c, 1, &ctx, &mut ledger).unwrap();
        assert_eq!(g.value(two), &x);

        let mut no_shift = c;
        no_shift.loop_shift = false;
        let plain = tt_layer_forward(&mut g, &store, xv, &no_shift, 0, &ctx, &mut ledger).unwrap();
        assert_eq!(g.value(plain), &x);
    }

    #[test]
    fn tracer_cell_stays_put() {
        let c = TTConfig {
            num_layers: 4,
            ..cfg()
        };
        let mut store = ParameterStore::new(8);
        init_params(&c, &mut store).unwrap();
        zero_branches(&c, &mut store);
        let mut x = Tensor::zeros(&[6, 6, 4]);
        x.data_mut()[(2 * 6 + 5) * 4 + 1] = 7.0;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = tt_forward(&mut g, &store, xv, &c, &mut FlopLedger::default()).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn tt_forward_rejects_unpadded_input() {
        let c = TTConfig { b: 3, ..cfg() };
        let mut store = ParameterStore::new(8);
        init_params(&c, &mut store).unwrap();
        let mut g = Graph::new();
        let xv = g.input(random(3, &[4, 4, 4]));
        assert!(matches!(
            tt_forward(&mut g, &store, xv, &c, &mut FlopLedger::default()),
            Err(Error::Padding { .. })
        ));
    }

    #[test]
    fn gate_limits_and_midpoint() {
        let c = cfg();
        let mut store = ParameterStore::new(8);
        init_params(&c, &mut store).unwrap();
        let (a, b) = (random(5, &[3, 3, 4]), random(6, &[3, 3, 4]));
        for (logit, check) in [(60.0, 0usize), (-60.0, 1), (0.0, 2)] {
            store.set_value(ids::GATE, Tensor::scalar(logit)).unwrap();
            let mut g = Graph::new();
            let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
            let out = weighted_residual(&mut g, &store, av, bv).unwrap();
            let o = g.value(out);
            match check {
                0 => assert!(o.max_abs_diff(&a) < 1e-12),
                1 => assert!(o.max_abs_diff(&b) < 1e-12),
                _ => {
                    let mean: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
                    assert!(o.max_abs_diff(&Tensor::new(vec![3, 3, 4], mean).unwrap()) < 1e-15);
                }
            }
        }
    }

    #[test]
    fn padding_round_trip() {
        let x = random(9, &[3, 3, 2]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let p = pad_table(&mut g, xv, 4).unwrap();
        assert_eq!(g.shape(p), &[4, 4, 2]);
        assert!(g.value(p).row(3).iter().all(|&v| v == 0.0));
        let back = unpad_table(&mut g, p, 3).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn padded_len_keeps_window_inside_table() {
        let c = TTConfig::new(8, 2, 2, 3);
        assert_eq!(c.padded_len(3), 6);
        assert_eq!(c.padded_len(7), 8);
        assert_eq!(c.shift(), 1);
        assert_eq!(TTConfig::new(8, 2, 7, 3).shift(), 3);
    }
}
