//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! per-node gradients; parameter leaves can then be flushed into a
//! [`ParameterStore`].

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query/key grouping for the attention op.
#[derive(Clone, Debug)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// How queries are wired to keys inside an attention node.
#[derive(Clone, Debug)]
pub enum AttnLayout {
    /// Each group's queries attend to exactly that group's keys (gather).
    Groups(Arc<Vec<AttnGroup>>),
    /// Every query scores every key; `mask[q * n + k] == false` adds a large
    /// negative bias before the softmax.
    Dense { mask: Option<Arc<Vec<bool>>> },
}

/// Additive score bias applied to masked-out key positions.
pub const MASK_BIAS: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    OuterSum {
        a: Var,
        b: Var,
    },
    Bilinear {
        ha: Var,
        ho: Var,
        w2: Var,
        proj: Vec<f64>,
    },
    SpanMaxPool {
        h: Var,
        argmax: Vec<u32>,
    },
    Conv3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Arc<Vec<Option<usize>>>,
    },
    RectMaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Gate {
        a: Var,
        b: Var,
        logit: Var,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; gradients are still tracked so callers can inspect them.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls share one node.
    pub fn param(&mut self, store: &ParameterStore, id: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(id) {
            return Ok(v);
        }
        let value = store.value(id)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(id.to_string(), v);
        self.param_order.push((id.to_string(), v));
        Ok(v)
    }

    /// `y = x W + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let in_dim = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != in_dim {
            return Err(shape_err("linear", &xs, &ws));
        }
        let out_dim = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(shape_err("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bias);
            }
        }
        matmul_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            in_dim,
            out_dim,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| gelu(x)).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Layer normalization over the trailing axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", xv.shape(), self.shape(gain)));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c == 0 {
            return Err(Error::EmptyAxis("softmax"));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Mean cross-entropy over the rows of `logits` (trailing axis = classes).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.value(logits).rows();
        let n = targets.len() as f64;
        self.weighted_cross_entropy(logits, targets, &vec![1.0; rows], n)
    }

    /// `sum_r weights[r] * CE(row r, targets[r]) / denom`. Rows with weight 0
    /// are ignored entirely (their targets are not range-checked).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        denom: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if k == 0 {
            return Err(Error::EmptyAxis("cross_entropy"));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= k {
                return Err(Error::Index {
                    what: "cross_entropy classes",
                    index: t,
                    bound: k,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if denom > 0.0 { loss / denom } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
                probs,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`; output `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, width) = (tv.shape()[0], tv.last_dim());
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the trailing axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", &lead, s));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a, b: [n, k]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || av.shape() != bv.shape() {
            return Err(shape_err("outer_sum", av.shape(), bv.shape()));
        }
        let (n, k) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; n * n * k];
        for i in 0..n {
            for j in 0..n {
                let o = &mut out[(i * n + j) * k..(i * n + j + 1) * k];
                for ((ov, &x), &y) in o.iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                    *ov = x + y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, n, k], out)?, Op::OuterSum { a, b }, rg))
    }

    /// `out[i, j, c] = ha[i]^T W2[:, c, :] ho[j]` with `W2: [d, k, d]`.
    pub fn bilinear(&mut self, ha: Var, ho: Var, w2: Var) -> Result<Var> {
        let (hs, os, ws) = (self.shape(ha), self.shape(ho), self.shape(w2));
        if hs.len() != 2 || hs != os || ws.len() != 3 || ws[0] != hs[1] || ws[2] != hs[1] {
            return Err(shape_err("bilinear", hs, ws));
        }
        let (n, d, k) = (hs[0], hs[1], ws[1]);
        // proj[i, c, q] = sum_p ha[i, p] W2[p, c, q]
        let mut proj = vec![0.0; n * k * d];
        matmul_acc(
            self.value(ha).data(),
            self.value(w2).data(),
            &mut proj,
            n,
            d,
            k * d,
        );
        let hov = self.value(ho).data();
        let mut out = vec![0.0; n * n * k];
        for i in 0..n {
            for j in 0..n {
                let hj = &hov[j * d..(j + 1) * d];
                for c in 0..k {
                    let p = &proj[(i * k + c) * d..(i * k + c + 1) * d];
                    out[(i * n + j) * k + c] = dot(p, hj);
                }
            }
        }
        let rg = self.rg(ha) || self.rg(ho) || self.rg(w2);
        Ok(self.push(
            Tensor::new(vec![n, n, k], out)?,
            Op::Bilinear { ha, ho, w2, proj },
            rg,
        ))
    }

    /// `out[i, j, :]` = elementwise max of rows `min(i,j)..=max(i,j)` of `h`.
    pub fn span_max_pool(&mut self, h: Var) -> Result<Var> {
        let hv = self.value(h);
        if hv.shape().len() != 2 {
            return Err(shape_err("span_max_pool", hv.shape(), &[0, 0]));
        }
        let (n, d) = (hv.shape()[0], hv.shape()[1]);
        let mut out = vec![0.0; n * n * d];
        let mut argmax = vec![0u32; n * n * d];
        for i in 0..n {
            // running max from i forward fills (i, j) and (j, i) for j >= i
            let mut cur = hv.row(i).to_vec();
            let mut arg = vec![i as u32; d];
            for j in i..n {
                if j > i {
                    for (c, &v) in hv.row(j).iter().enumerate() {
                        if v > cur[c] {
                            cur[c] = v;
                            arg[c] = j as u32;
                        }
                    }
                }
                for &(a, b) in &[(i, j), (j, i)] {
                    let base = (a * n + b) * d;
                    out[base..base + d].copy_from_slice(&cur);
                    argmax[base..base + d].copy_from_slice(&arg);
                }
            }
        }
        let rg = self.rg(h);
        Ok(self.push(
            Tensor::new(vec![n, n, d], out)?,
            Op::SpanMaxPool { h, argmax },
            rg,
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1, over a `[n, m, c_in]` grid.
    /// Kernel shape `[3, 3, c_in, c_out]`, bias `[c_out]`.
    pub fn conv3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != xs[2] {
            return Err(shape_err("conv3", &xs, &ws));
        }
        let (rows, cols, cin, cout) = (xs[0], xs[1], xs[2], ws[3]);
        if self.shape(b) != [cout] {
            return Err(shape_err("conv3 bias", &ws, self.shape(b)));
        }
        let mut out = vec![0.0; rows * cols * cout];
        let bias = self.value(b).data();
        for cell in out.chunks_mut(cout) {
            cell.copy_from_slice(bias);
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for_each_conv_tap(rows, cols, |tap, in_start, out_start, count| {
            let wk = &wd[tap * cin * cout..(tap + 1) * cin * cout];
            matmul_acc(
                &xd[in_start * cin..(in_start + count) * cin],
                wk,
                &mut out[out_start * cout..(out_start + count) * cout],
                count,
                cin,
                cout,
            );
        });
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![rows, cols, cout], out)?,
            Op::Conv3 { x, w, b },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `[N, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: AttnLayout) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs || self.shape(v) != qs {
            return Err(shape_err("attention", &qs, self.shape(k)));
        }
        let (n, dm) = (qs[0], qs[1]);
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Config(format!(
                "model width {dm} not divisible by {heads} heads"
            )));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * dm];
        let probs = match &layout {
            AttnLayout::Groups(groups) => {
                let total: usize = groups.iter().map(|g| g.queries.len() * g.keys.len()).sum();
                let mut probs = Vec::with_capacity(total * heads);
                for g in groups.iter() {
                    for &qi in &g.queries {
                        for h in 0..heads {
                            let qh = &qd[qi * dm + h * dh..qi * dm + (h + 1) * dh];
                            let start = probs.len();
                            probs.extend(
                                g.keys
                                    .iter()
                                    .map(|&kj| dot(qh, &kd[kj * dm + h * dh..kj * dm + (h + 1) * dh]) * scale),
                            );
                            let p = &mut probs[start..];
                            softmax_in_place(p);
                            let o = &mut out[qi * dm + h * dh..qi * dm + (h + 1) * dh];
                            for (&pk, &kj) in p.iter().zip(&g.keys) {
                                axpy(pk, &vd[kj * dm + h * dh..kj * dm + (h + 1) * dh], o);
                            }
                        }
                    }
                }
                probs
            }
            AttnLayout::Dense { mask } => {
                if let Some(m) = mask {
                    if m.len() != n * n {
                        return Err(shape_err("attention mask", &[m.len()], &[n, n]));
                    }
                }
                let mut probs = vec![0.0; n * heads * n];
                for qi in 0..n {
                    for h in 0..heads {
                        let qh = &qd[qi * dm + h * dh..qi * dm + (h + 1) * dh];
                        let p = &mut probs[(qi * heads + h) * n..(qi * heads + h + 1) * n];
                        for (kj, s) in p.iter_mut().enumerate() {
                            *s = dot(qh, &kd[kj * dm + h * dh..kj * dm + (h + 1) * dh]) * scale;
                            if let Some(m) = mask {
                                if !m[qi * n + kj] {
                                    *s += MASK_BIAS;
                                }
                            }
                        }
                        softmax_in_place(p);
                        let o = &mut out[qi * dm + h * dh..qi * dm + (h + 1) * dh];
                        for (kj, &pk) in p.iter().enumerate() {
                            axpy(pk, &vd[kj * dm + h * dh..kj * dm + (h + 1) * dh], o);
                        }
                    }
                }
                probs
            }
        };
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(qs, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Row gather over `x` viewed as `[rows, c]`; `None` yields a zero row.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>, out_shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.last_dim());
        let numel: usize = out_shape.iter().product();
        if *out_shape.last().unwrap() != c || numel != idx.len() * c {
            return Err(shape_err("gather", xv.shape(), out_shape));
        }
        let mut out = vec![0.0; numel];
        for (o, src) in out.chunks_mut(c).zip(idx.iter()) {
            if let Some(s) = *src {
                if s >= rows {
                    return Err(Error::Index {
                        what: "gather rows",
                        index: s,
                        bound: rows,
                    });
                }
                o.copy_from_slice(xv.row(s));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape.to_vec(), out)?, Op::Gather { x, idx }, rg))
    }

    /// Elementwise max over each inclusive rectangle `(r0, c0, r1, c1)` of a
    /// `[n, m, c]` table; output `[rects.len(), c]`.
    pub fn rect_max_pool(&mut self, x: Var, rects: &[(usize, usize, usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() != 3 {
            return Err(shape_err("rect_max_pool", xs, &[0, 0, 0]));
        }
        let (rows, cols, c) = (xs[0], xs[1], xs[2]);
        if rects.is_empty() {
            return Err(Error::Geometry("no rectangles to pool".into()));
        }
        let mut out = vec![f64::NEG_INFINITY; rects.len() * c];
        let mut argmax = vec![0u32; rects.len() * c];
        for (k, &(r0, c0, r1, c1)) in rects.iter().enumerate() {
            if r0 > r1 || c0 > c1 || r1 >= rows || c1 >= cols {
                return Err(Error::Geometry(format!(
                    "rectangle ({r0},{c0})-({r1},{c1}) invalid for {rows}x{cols} table"
                )));
            }
            let o = &mut out[k * c..(k + 1) * c];
            let a = &mut argmax[k * c..(k + 1) * c];
            for r in r0..=r1 {
                for cc in c0..=c1 {
                    let cell = r * cols + cc;
                    for (ch, &v) in xv.row(cell).iter().enumerate() {
                        if v > o[ch] {
                            o[ch] = v;
                            a[ch] = cell as u32;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rects.len(), c], out)?,
            Op::RectMaxPool { x, argmax },
            rg,
        ))
    }

    /// `sigmoid(logit) * a + (1 - sigmoid(logit)) * b`. The logit is either a
    /// single scalar or one value per trailing channel.
    pub fn gate(&mut self, a: Var, b: Var, logit: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("gate", self.shape(a), self.shape(b)));
        }
        let c = self.value(a).last_dim();
        let gl = self.value(logit).numel();
        if gl != 1 && gl != c {
            return Err(shape_err("gate logit", self.shape(logit), &[c]));
        }
        let gates: Vec<f64> = self.value(logit).data().iter().map(|&l| sigmoid(l)).collect();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .iter()
            .zip(bv)
            .enumerate()
            .map(|(i, (&x, &y))| {
                let g = gates[if gl == 1 { 0 } else { i % c }];
                g * x + (1.0 - g) * y
            })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b) || self.rg(logit);
        Ok(self.push(t, Op::Gate { a, b, logit }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.backward_node(idx, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    /// Gradients of the parameter leaves that received one, in first-use order.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads) -> impl Iterator<Item = (&'a str, &'a [f64])> + 'a {
        self.param_order
            .iter()
            .filter_map(|(id, v)| grads.get(*v).map(|g| (id.as_str(), g)))
    }

    /// Adds gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParameterStore) -> Result<()> {
        for (id, v) in &self.param_order {
            if let Some(g) = grads.get(*v) {
                let p = store.get_mut(id)?;
                for (pg, &gv) in p.grad.data_mut().iter_mut().zip(g) {
                    *pg += gv;
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let in_dim = xv.last_dim();
                let out_dim = node.value.last_dim();
                let rows = xv.rows();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    matmul_bt_acc(gout, self.value(*w).data(), gx, rows, out_dim, in_dim);
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    matmul_at_acc(xv.data(), gout, gw, rows, in_dim, out_dim);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_buf(grads, *b) {
                        for row in gout.chunks(out_dim) {
                            axpy(1.0, row, gb);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(1.0, gout, ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    axpy(1.0, gout, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(1.0, gout, ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    axpy(-1.0, gout, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((g, &o), &y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += o * y;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((g, &o), &x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += o * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(*f, gout, ga);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((g, &o), &x) in ga.iter_mut().zip(gout).zip(av) {
                        *g += o * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.grad_buf(grads, *gain) {
                    for (o, h) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += o[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for o in gout.chunks(c) {
                        axpy(1.0, o, gb);
                    }
                }
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let inv_c = 1.0 / c as f64;
                    for (r, (o, h)) in gout.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = o[j] * gv[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        let gxr = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = o[j] * gv[j];
                            gxr[j] += rstd[r] * (dh - inv_c * s1 - h[j] * inv_c * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, (o, yr)) in gout.chunks(c).zip(y.chunks(c)).enumerate() {
                        let s = dot(o, yr);
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (o[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                denom,
                probs,
            } => {
                if *denom <= 0.0 {
                    return;
                }
                let k = self.value(*logits).last_dim();
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    let scale = gout[0] / denom;
                    for (r, p) in probs.chunks(k).enumerate() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let g = &mut gl[r * k..(r + 1) * k];
                        for j in 0..k {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            g[j] += scale * w * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let width = node.value.last_dim();
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &gout[r * width..(r + 1) * width], &mut gt[id * width..(id + 1) * width]);
                    }
                }
            }
            Op::Concat { parts } => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pw = self.value(p).last_dim();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &gout[r * width + offset..r * width + offset + pw],
                                &mut gp[r * pw..(r + 1) * pw],
                            );
                        }
                    }
                    offset += pw;
                }
            }
            Op::OuterSum { a, b } => {
                let s = self.shape(*a);
                let (n, k) = (s[0], s[1]);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..n {
                        for j in 0..n {
                            axpy(1.0, &gout[(i * n + j) * k..(i * n + j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..n {
                        for j in 0..n {
                            axpy(1.0, &gout[(i * n + j) * k..(i * n + j + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Bilinear { ha, ho, w2, proj } => {
                let hs = self.shape(*ha);
                let (n, d) = (hs[0], hs[1]);
                let k = self.shape(*w2)[1];
                let hov = self.value(*ho).data();
                if let Some(gho) = self.grad_buf(grads, *ho) {
                    for i in 0..n {
                        for j in 0..n {
                            let gj = &mut gho[j * d..(j + 1) * d];
                            for c in 0..k {
                                let g = gout[(i * n + j) * k + c];
                                axpy(g, &proj[(i * k + c) * d..(i * k + c + 1) * d], gj);
                            }
                        }
                    }
                }
                let need_proj = self.rg(*ha) || self.rg(*w2);
                if need_proj {
                    // dproj[i, c, :] = sum_j gout[i, j, c] ho[j, :]
                    let mut dproj = vec![0.0; n * k * d];
                    for i in 0..n {
                        for j in 0..n {
                            let hj = &hov[j * d..(j + 1) * d];
                            for c in 0..k {
                                let g = gout[(i * n + j) * k + c];
                                axpy(g, hj, &mut dproj[(i * k + c) * d..(i * k + c + 1) * d]);
                            }
                        }
                    }
                    if let Some(gha) = self.grad_buf(grads, *ha) {
                        matmul_bt_acc(&dproj, self.value(*w2).data(), gha, n, k * d, d);
                    }
                    if let Some(gw) = self.grad_buf(grads, *w2) {
                        matmul_at_acc(self.value(*ha).data(), &dproj, gw, n, d, k * d);
                    }
                }
            }
            Op::SpanMaxPool { h, argmax } => {
                let d = node.value.last_dim();
                if let Some(gh) = self.grad_buf(grads, *h) {
                    for (i, (&g, &a)) in gout.iter().zip(argmax).enumerate() {
                        gh[a as usize * d + i % d] += g;
                    }
                }
            }
            Op::Conv3 { x, w, b } => {
                let xs = self.shape(*x);
                let (rows, cols, cin) = (xs[0], xs[1], xs[2]);
                let cout = node.value.last_dim();
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for cell in gout.chunks(cout) {
                        axpy(1.0, cell, gb);
                    }
                }
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for_each_conv_tap(rows, cols, |tap, in_start, out_start, count| {
                        matmul_bt_acc(
                            &gout[out_start * cout..(out_start + count) * cout],
                            &wd[tap * cin * cout..(tap + 1) * cin * cout],
                            &mut gx[in_start * cin..(in_start + count) * cin],
                            count,
                            cout,
                            cin,
                        );
                    });
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    for_each_conv_tap(rows, cols, |tap, in_start, out_start, count| {
                        matmul_at_acc(
                            &xd[in_start * cin..(in_start + count) * cin],
                            &gout[out_start * cout..(out_start + count) * cout],
                            &mut gw[tap * cin * cout..(tap + 1) * cin * cout],
                            count,
                            cin,
                            cout,
                        );
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (n, dm) = (node.value.shape()[0], node.value.shape()[1]);
                let heads = *heads;
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; n * dm];
                let mut gk = vec![0.0; n * dm];
                let mut gv = vec![0.0; n * dm];
                let mut dp: Vec<f64> = Vec::new();
                let mut step = |qi: usize, h: usize, keys: &mut dyn Iterator<Item = usize>, p: &[f64]| {
                    let o = &gout[qi * dm + h * dh..qi * dm + (h + 1) * dh];
                    let qh = &qd[qi * dm + h * dh..qi * dm + (h + 1) * dh];
                    let keys: Vec<usize> = keys.collect();
                    dp.clear();
                    let mut sum = 0.0;
                    for (&kj, &pk) in keys.iter().zip(p) {
                        let s = dot(o, &vd[kj * dm + h * dh..kj * dm + (h + 1) * dh]);
                        sum += pk * s;
                        dp.push(s);
                        axpy(pk, o, &mut gv[kj * dm + h * dh..kj * dm + (h + 1) * dh]);
                    }
                    for ((&kj, &pk), &s) in keys.iter().zip(p).zip(dp.iter()) {
                        let ds = pk * (s - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &kd[kj * dm + h * dh..kj * dm + (h + 1) * dh], &mut gq[qi * dm + h * dh..qi * dm + (h + 1) * dh]);
                        axpy(ds, qh, &mut gk[kj * dm + h * dh..kj * dm + (h + 1) * dh]);
                    }
                };
                match layout {
                    AttnLayout::Groups(groups) => {
                        let mut off = 0;
                        for g in groups.iter() {
                            let nk = g.keys.len();
                            for &qi in &g.queries {
                                for h in 0..heads {
                                    step(qi, h, &mut g.keys.iter().copied(), &probs[off..off + nk]);
                                    off += nk;
                                }
                            }
                        }
                    }
                    AttnLayout::Dense { .. } => {
                        for qi in 0..n {
                            for h in 0..heads {
                                let p = &probs[(qi * heads + h) * n..(qi * heads + h + 1) * n];
                                step(qi, h, &mut (0..n), p);
                            }
                        }
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(buf) = self.grad_buf(grads, var) {
                        axpy(1.0, &g, buf);
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = node.value.last_dim();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (o, src) in gout.chunks(c).zip(idx.iter()) {
                        if let Some(s) = *src {
                            axpy(1.0, o, &mut gx[s * c..(s + 1) * c]);
                        }
                    }
                }
            }
            Op::RectMaxPool { x, argmax } => {
                let c = node.value.last_dim();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (i, (&g, &a)) in gout.iter().zip(argmax).enumerate() {
                        gx[a as usize * c + i % c] += g;
                    }
                }
            }
            Op::Gate { a, b, logit } => {
                let c = node.value.last_dim();
                let lv = self.value(*logit).data();
                let gl_len = lv.len();
                let gates: Vec<f64> = lv.iter().map(|&l| sigmoid(l)).collect();
                let gidx = |i: usize| if gl_len == 1 { 0 } else { i % c };
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (i, (g, &o)) in ga.iter_mut().zip(gout).enumerate() {
                        *g += gates[gidx(i)] * o;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (i, (g, &o)) in gb.iter_mut().zip(gout).enumerate() {
                        *g += (1.0 - gates[gidx(i)]) * o;
                    }
                }
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(gg) = self.grad_buf(grads, *logit) {
                    for (i, &o) in gout.iter().enumerate() {
                        let s = gates[gidx(i)];
                        gg[gidx(i)] += o * (av[i] - bv[i]) * s * (1.0 - s);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let g = gout[0];
                    ga.iter_mut().for_each(|v| *v += g);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(1.0, gout, ga);
                }
            }
        }
    }
}

/// Enumerates contiguous runs for each 3x3 tap: `(tap, input cell start,
/// output cell start, run length)` over a row-major `rows x cols` grid.
fn for_each_conv_tap(rows: usize, cols: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for dr in 0..3usize {
        for dc in 0..3usize {
            let tap = dr * 3 + dc;
            // output column c reads input column c + dc - 1
            let c_lo = if dc == 0 { 1 } else { 0 };
            let c_hi = if dc == 2 { cols - 1 } else { cols };
            if c_lo >= c_hi {
                continue;
            }
            for r in 0..rows {
                let ir = r as isize + dr as isize - 1;
                if ir < 0 || ir >= rows as isize {
                    continue;
                }
                let ir = ir as usize;
                let out_start = r * cols + c_lo;
                let in_start = ir * cols + c_lo + dc - 1;
                f(tap, in_start, out_start, c_hi - c_lo);
            }
        }
    }
}
