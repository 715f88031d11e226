//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. Node values are computed eagerly; [`Graph::backward`] replays the
//! tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a `requires_grad` leaf. Weights live outside
//! the graph as plain [`Tensor`]s and are bound in per pass with
//! [`Graph::leaf`].
//!
//! All nodes are 2-D matrices; scalars are 1x1. Every matrix product
//! charges its multiply-accumulate count to the graph's [`OpLedger`] under
//! a caller-supplied [`CostLabel`], which is how the attention cost model
//! reads real operation counts off instrumented forward passes.

use crate::error::{Error, Result};
use crate::ledger::{CostLabel, OpLedger, OpTag};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Attention probabilities recorded by [`Graph::enable_attention_probe`].
///
/// `key_mass[k]` is the total probability assigned to key position `k`,
/// summed over query rows and heads. Masked keys hold 0.
#[derive(Debug, Clone)]
pub struct AttnProbe {
    pub tag: OpTag,
    pub heads: usize,
    pub query_rows: usize,
    pub key_mass: Vec<f64>,
}

struct AttentionSaved {
    q_in: Var,
    kv_in: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    valid: Vec<usize>,
    q_proj: Vec<f64>,
    k_proj: Vec<f64>,
    v_proj: Vec<f64>,
    /// heads x lq x valid.len(), row-major.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    lq: usize,
    lk: usize,
    d: usize,
}

struct LayerNormSaved {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm(Box<LayerNormSaved>),
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Row { a: Var, index: usize },
    Attention(Box<AttentionSaved>),
    LceLoss { scores: Vec<Var>, probs: Vec<f64>, positive: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ledger: OpLedger,
    grads: Vec<Option<Vec<f64>>>,
    probe_enabled: bool,
    probes: Vec<AttnProbe>,
}

/// `c += a(m x k) * b(k x n)`, row-major.
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    }
}

/// `da += g(m x n) * b(k x n)^T`.
fn matmul_acc_bt(da: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gj, bj) in g_row.iter().zip(b_row) {
                acc += gj * bj;
            }
            da_row[p] += acc;
        }
    }
}

/// `db += a(m x k)^T * g(m x n)`.
fn matmul_acc_at(db: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dj, gj) in db_row.iter_mut().zip(g_row) {
                *dj += a_ip * gj;
            }
        }
    }
}

const GELU_COEF: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn ledger(&self) -> &OpLedger {
        &self.ledger
    }

    /// Record per-call attention probability masses for inspection.
    pub fn enable_attention_probe(&mut self) {
        self.probe_enabled = true;
    }

    pub fn attention_probes(&self) -> &[AttnProbe] {
        &self.probes
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Copy a node's value out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.data.clone()).expect("node shape")
    }

    /// Gradient of the last `backward` target w.r.t. node `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    /// Bind a tensor into the graph as a leaf, copying its data and
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), t.requires_grad, Op::Leaf))
    }

    /// A constant (non-differentiable) leaf from raw data.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "constant shape [{rows}, {cols}] implies {} elements but data has {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, false, Op::Leaf))
    }

    /// Matrix product, charging `m*n*k` MACs under `label`.
    pub fn matmul(&mut self, a: Var, b: Var, label: CostLabel) -> Result<Var> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::shape("matmul", &[m, ka], &[kb, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        self.ledger.record(label, (m * n * ka) as u64);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(m, n, out, rg, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::shape(name, &[ra, ca], &[rb, cb]));
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(ra, ca, out, rg, op))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        let rg = self.needs_grad(&[a]);
        self.push(r, c, out, rg, Op::Scale { a, factor })
    }

    /// Sum of all elements, as a 1x1 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs_grad(&[a]);
        self.push(1, 1, vec![total], rg, Op::Sum { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.needs_grad(&[a]);
        self.push(r, c, out, rg, Op::Gelu { a })
    }

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = along
    /// rows). Each slice subtracts its max before exponentiating. Rejects
    /// non-finite inputs.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if axis > 1 {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for 2-D")));
        }
        let x = &self.nodes[a.0].data;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![0.0; r * c];
        let (slices, len, stride, step) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for s in 0..slices {
            let base = s * stride;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[base + i * step]);
            }
            let mut denom = 0.0;
            for i in 0..len {
                let e = (x[base + i * step] - max).exp();
                out[base + i * step] = e;
                denom += e;
            }
            for i in 0..len {
                out[base + i * step] /= denom;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(r, c, out, rg, Op::Softmax { a, axis }))
    }

    /// Row-wise layer normalization with affine parameters.
    ///
    /// Each row is shifted to zero mean and scaled to unit variance
    /// (population variance, epsilon 1e-5), then multiplied by `gain` and
    /// shifted by `bias` (both 1 x cols).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.dims(x);
        let (gr, gc) = self.dims(gain);
        let (br, bc) = self.dims(bias);
        if (gr, gc) != (1, c) || (br, bc) != (1, c) {
            return Err(Error::shape("layer_norm", &[r, c], &[gr.max(br), gc.max(bc)]));
        }
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                out[i * c + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(
            r,
            c,
            out,
            rg,
            Op::LayerNorm(Box::new(LayerNormSaved {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            })),
        ))
    }

    /// Gather rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (tr, tc) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= tr) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for table with {tr} rows"
            )));
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * tc);
        for &id in ids {
            out.extend_from_slice(&td[id * tc..(id + 1) * tc]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(ids.len(), tc, out, rg, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c0) = self.dims(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != c0 {
                return Err(Error::shape("concat_rows", &[rows, c0], &[r, c]));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(rows, c0, out, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Extract one row as a 1 x cols matrix.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if index >= r {
            return Err(Error::Contract(format!("row {index} out of range for {r} rows")));
        }
        let out = self.nodes[a.0].data[index * c..(index + 1) * c].to_vec();
        let rg = self.needs_grad(&[a]);
        Ok(self.push(1, c, out, rg, Op::Row { a, index }))
    }

    /// Multi-head scaled dot-product attention with an exact key mask.
    ///
    /// Queries attend only to key positions where `key_mask` is true; masked
    /// keys are excluded from the score computation and the softmax
    /// normalization entirely, so padding never touches the arithmetic of
    /// unmasked positions. Score scaling is `1/sqrt(head_dim)`.
    ///
    /// Q/K/V/output projections charge MACs under `Projection`; the score
    /// product and the weighted value sum charge under `label.tag`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        heads: usize,
        key_mask: &[bool],
        label: CostLabel,
    ) -> Result<Var> {
        let (lq, d) = self.dims(q_in);
        let (lk, dk) = self.dims(kv_in);
        if dk != d {
            return Err(Error::shape("attention inputs", &[lq, d], &[lk, dk]));
        }
        for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
            let (wr, wc) = self.dims(w);
            if (wr, wc) != (d, d) {
                return Err(Error::shape(
                    match name {
                        "wq" => "attention wq",
                        "wk" => "attention wk",
                        "wv" => "attention wv",
                        _ => "attention wo",
                    },
                    &[d, d],
                    &[wr, wc],
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "head count {heads} does not divide model width {d}"
            )));
        }
        if key_mask.len() != lk {
            return Err(Error::Contract(format!(
                "key mask length {} does not match {} keys",
                key_mask.len(),
                lk
            )));
        }
        let valid: Vec<usize> = (0..lk).filter(|&j| key_mask[j]).collect();
        if valid.is_empty() {
            return Err(Error::Contract("attention with all keys masked".into()));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let nv = valid.len();

        let proj_label = CostLabel::new(label.phase, OpTag::Projection);
        let mut q_proj = vec![0.0; lq * d];
        matmul_acc(&mut q_proj, &self.nodes[q_in.0].data, &self.nodes[wq.0].data, lq, d, d);
        let mut k_proj = vec![0.0; lk * d];
        matmul_acc(&mut k_proj, &self.nodes[kv_in.0].data, &self.nodes[wk.0].data, lk, d, d);
        let mut v_proj = vec![0.0; lk * d];
        matmul_acc(&mut v_proj, &self.nodes[kv_in.0].data, &self.nodes[wv.0].data, lk, d, d);
        self.ledger.record(proj_label, ((lq + 2 * lk) * d * d) as u64);

        let mut probs = vec![0.0; heads * lq * nv];
        let mut ctx = vec![0.0; lq * d];
        let mut scores = vec![0.0; nv];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..lq {
                let q_row = &q_proj[i * d + off..i * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for (jj, &j) in valid.iter().enumerate() {
                    let k_row = &k_proj[j * d + off..j * d + off + hd];
                    let mut acc = 0.0;
                    for (qv, kv) in q_row.iter().zip(k_row) {
                        acc += qv * kv;
                    }
                    let s = acc * scale;
                    scores[jj] = s;
                    max = max.max(s);
                }
                let p_row = &mut probs[(h * lq + i) * nv..(h * lq + i + 1) * nv];
                let mut denom = 0.0;
                for jj in 0..nv {
                    let e = (scores[jj] - max).exp();
                    p_row[jj] = e;
                    denom += e;
                }
                for p in p_row.iter_mut() {
                    *p /= denom;
                }
                let ctx_row = &mut ctx[i * d + off..i * d + off + hd];
                for (jj, &j) in valid.iter().enumerate() {
                    let p = p_row[jj];
                    let v_row = &v_proj[j * d + off..j * d + off + hd];
                    for (cv, vv) in ctx_row.iter_mut().zip(v_row) {
                        *cv += p * vv;
                    }
                }
            }
        }
        // Score product and weighted sum: lq*nv*hd MACs per head, each.
        self.ledger.record(label, 2 * (lq * nv * d) as u64);

        if self.probe_enabled {
            let mut key_mass = vec![0.0; lk];
            for h in 0..heads {
                for i in 0..lq {
                    let p_row = &probs[(h * lq + i) * nv..(h * lq + i + 1) * nv];
                    for (jj, &j) in valid.iter().enumerate() {
                        key_mass[j] += p_row[jj];
                    }
                }
            }
            self.probes.push(AttnProbe {
                tag: label.tag,
                heads,
                query_rows: lq,
                key_mass,
            });
        }

        let mut out = vec![0.0; lq * d];
        matmul_acc(&mut out, &ctx, &self.nodes[wo.0].data, lq, d, d);
        self.ledger.record(proj_label, (lq * d * d) as u64);

        let rg = self.needs_grad(&[q_in, kv_in, wq, wk, wv, wo]);
        Ok(self.push(
            lq,
            d,
            out,
            rg,
            Op::Attention(Box::new(AttentionSaved {
                q_in,
                kv_in,
                wq,
                wk,
                wv,
                wo,
                heads,
                valid,
                q_proj,
                k_proj,
                v_proj,
                probs,
                ctx,
                lq,
                lk,
                d,
            })),
        ))
    }

    /// Group-softmax cross-entropy of the score at `positive` against the
    /// rest of the group: `-log(exp(s+) / sum_j exp(s_j))`.
    pub fn lce_loss(&mut self, scores: &[Var], positive: usize) -> Result<Var> {
        if scores.len() < 2 {
            return Err(Error::Contract(format!(
                "LCE needs at least 2 scores, got {}",
                scores.len()
            )));
        }
        if positive >= scores.len() {
            return Err(Error::Contract(format!(
                "positive index {positive} out of range for group of {}",
                scores.len()
            )));
        }
        let mut vals = Vec::with_capacity(scores.len());
        for &s in scores {
            let (r, c) = self.dims(s);
            if (r, c) != (1, 1) {
                return Err(Error::Contract(format!(
                    "LCE scores must be scalars, got [{r}, {c}]"
                )));
            }
            vals.push(self.nodes[s.0].data[0]);
        }
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = vals.iter().map(|v| (v - max).exp()).sum();
        let probs: Vec<f64> = vals.iter().map(|v| (v - max).exp() / denom).collect();
        let loss = denom.ln() + max - vals[positive];
        let rg = self.needs_grad(scores);
        Ok(self.push(
            1,
            1,
            vec![loss],
            rg,
            Op::LceLoss {
                scores: scores.to_vec(),
                probs,
                positive,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that depends on a `requires_grad` leaf; unreached `requires_grad`
    /// leaves get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.rows * node.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got [{}, {}]",
                node.rows, node.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        // Leaves that never received flow still report a zero gradient.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        for (g, c) in slot.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_acc_bt(&mut da, gout, &self.nodes[b.0].data, m, k, n);
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_acc_at(&mut db, &self.nodes[a.0].data, gout, m, k, n);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, gout);
                self.accum(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, gout);
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { a, factor } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                    self.accum(grads, *a, &da);
                }
            }
            Op::Sum { a } => {
                if self.nodes[a.0].requires_grad {
                    let da = vec![gout[0]; self.nodes[a.0].data.len()];
                    self.accum(grads, *a, &da);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = gout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    self.accum(grads, *a, &da);
                }
            }
            Op::Softmax { a, axis } => {
                if !self.nodes[a.0].requires_grad {
                    return;
                }
                let (r, c) = (node.rows, node.cols);
                let y = &node.data;
                let mut da = vec![0.0; r * c];
                let (slices, len, stride, step) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                for s in 0..slices {
                    let base = s * stride;
                    let mut dot = 0.0;
                    for i in 0..len {
                        dot += gout[base + i * step] * y[base + i * step];
                    }
                    for i in 0..len {
                        let p = base + i * step;
                        da[p] = y[p] * (gout[p] - dot);
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::LayerNorm(saved) => {
                let (r, c) = (node.rows, node.cols);
                let g = &self.nodes[saved.gain.0].data;
                if self.nodes[saved.x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let go = &gout[i * c..(i + 1) * c];
                        let xh = &saved.xhat[i * c..(i + 1) * c];
                        let istd = saved.inv_std[i];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gd = go[j] * g[j];
                            m1 += gd;
                            m2 += gd * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gd = go[j] * g[j];
                            dx[i * c + j] = istd * (gd - m1 - xh[j] * m2);
                        }
                    }
                    self.accum(grads, saved.x, &dx);
                }
                if self.nodes[saved.gain.0].requires_grad {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gout[i * c + j] * saved.xhat[i * c + j];
                        }
                    }
                    self.accum(grads, saved.gain, &dg);
                }
                if self.nodes[saved.bias.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += gout[i * c + j];
                        }
                    }
                    self.accum(grads, saved.bias, &db);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.nodes[table.0].requires_grad {
                    let (tr, tc) = self.dims(*table);
                    let mut dt = vec![0.0; tr * tc];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            dt[id * tc + j] += gout[row * tc + j];
                        }
                    }
                    self.accum(grads, *table, &dt);
                }
            }
            Op::ConcatRows { parts } => {
                let c = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.dims(p);
                    if self.nodes[p.0].requires_grad {
                        self.accum(grads, p, &gout[offset * c..(offset + pr) * c]);
                    }
                    offset += pr;
                }
            }
            Op::Row { a, index } => {
                if self.nodes[a.0].requires_grad {
                    let (r, c) = self.dims(*a);
                    let mut da = vec![0.0; r * c];
                    da[index * c..(index + 1) * c].copy_from_slice(gout);
                    self.accum(grads, *a, &da);
                }
            }
            Op::Attention(saved) => self.backprop_attention(saved, gout, grads),
            Op::LceLoss {
                scores,
                probs,
                positive,
            } => {
                let g = gout[0];
                for (j, &s) in scores.iter().enumerate() {
                    if self.nodes[s.0].requires_grad {
                        let indicator = if j == *positive { 1.0 } else { 0.0 };
                        self.accum(grads, s, &[(probs[j] - indicator) * g]);
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (lq, lk, d) = (s.lq, s.lk, s.d);
        let hd = d / s.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let nv = s.valid.len();

        // Through the output projection.
        let mut dctx = vec![0.0; lq * d];
        matmul_acc_bt(&mut dctx, gout, &self.nodes[s.wo.0].data, lq, d, d);
        if self.nodes[s.wo.0].requires_grad {
            let mut dwo = vec![0.0; d * d];
            matmul_acc_at(&mut dwo, &s.ctx, gout, lq, d, d);
            self.accum(grads, s.wo, &dwo);
        }

        let mut dq_proj = vec![0.0; lq * d];
        let mut dk_proj = vec![0.0; lk * d];
        let mut dv_proj = vec![0.0; lk * d];
        let mut dprobs = vec![0.0; nv];
        for h in 0..s.heads {
            let off = h * hd;
            for i in 0..lq {
                let dctx_row = &dctx[i * d + off..i * d + off + hd];
                let p_row = &s.probs[(h * lq + i) * nv..(h * lq + i + 1) * nv];
                // dV and d(probs).
                let mut p_dot_dp = 0.0;
                for (jj, &j) in s.valid.iter().enumerate() {
                    let v_row = &s.v_proj[j * d + off..j * d + off + hd];
                    let mut dp = 0.0;
                    for (dc, vv) in dctx_row.iter().zip(v_row) {
                        dp += dc * vv;
                    }
                    dprobs[jj] = dp;
                    p_dot_dp += p_row[jj] * dp;
                    let dv_row = &mut dv_proj[j * d + off..j * d + off + hd];
                    let p = p_row[jj];
                    for (dv, dc) in dv_row.iter_mut().zip(dctx_row) {
                        *dv += p * dc;
                    }
                }
                // Softmax backward, then through the scaled score product.
                for (jj, &j) in s.valid.iter().enumerate() {
                    let dscore = p_row[jj] * (dprobs[jj] - p_dot_dp) * scale;
                    if dscore == 0.0 {
                        continue;
                    }
                    let k_row = &s.k_proj[j * d + off..j * d + off + hd];
                    let q_row = &s.q_proj[i * d + off..i * d + off + hd];
                    let dq_row = &mut dq_proj[i * d + off..i * d + off + hd];
                    for (dq, kv) in dq_row.iter_mut().zip(k_row) {
                        *dq += dscore * kv;
                    }
                    let dk_row = &mut dk_proj[j * d + off..j * d + off + hd];
                    for (dk, qv) in dk_row.iter_mut().zip(q_row) {
                        *dk += dscore * qv;
                    }
                }
            }
        }

        // Through the input projections.
        if self.nodes[s.q_in.0].requires_grad {
            let mut dq_in = vec![0.0; lq * d];
            matmul_acc_bt(&mut dq_in, &dq_proj, &self.nodes[s.wq.0].data, lq, d, d);
            self.accum(grads, s.q_in, &dq_in);
        }
        if self.nodes[s.wq.0].requires_grad {
            let mut dwq = vec![0.0; d * d];
            matmul_acc_at(&mut dwq, &self.nodes[s.q_in.0].data, &dq_proj, lq, d, d);
            self.accum(grads, s.wq, &dwq);
        }
        if self.nodes[s.kv_in.0].requires_grad {
            let mut dkv = vec![0.0; lk * d];
            matmul_acc_bt(&mut dkv, &dk_proj, &self.nodes[s.wk.0].data, lk, d, d);
            matmul_acc_bt(&mut dkv, &dv_proj, &self.nodes[s.wv.0].data, lk, d, d);
            self.accum(grads, s.kv_in, &dkv);
        }
        if self.nodes[s.wk.0].requires_grad {
            let mut dwk = vec![0.0; d * d];
            matmul_acc_at(&mut dwk, &self.nodes[s.kv_in.0].data, &dk_proj, lk, d, d);
            self.accum(grads, s.wk, &dwk);
        }
        if self.nodes[s.wv.0].requires_grad {
            let mut dwv = vec![0.0; d * d];
            matmul_acc_at(&mut dwv, &self.nodes[s.kv_in.0].data, &dv_proj, lk, d, d);
            self.accum(grads, s.wv, &dwv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::Phase;

    fn plabel() -> CostLabel {
        CostLabel::new(Phase::QueryDependent, OpTag::Projection)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = g.matmul(i2, a, plabel()).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut g = Graph::new();
        let a = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = g.constant(2, 2, vec![0.0; 4]).unwrap();
        let c = g.matmul(a, z, plabel()).unwrap();
        assert_eq!(g.value(c), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_hand_example() {
        // Hand multiply-accumulate: [[1,2],[3,4]] x [[5,6],[7,8]].
        let mut g = Graph::new();
        let a = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = g.matmul(a, b, plabel()).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(g.ledger().get(Phase::QueryDependent, OpTag::Projection), 8);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 2, vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b, plabel()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_rows() {
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![1000.0, 1000.0]).unwrap();
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut g = Graph::new();
        let x = g.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let expect = [0.0900, 0.2447, 0.6652];
        for (got, want) in g.value(y).iter().zip(expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(g.softmax(x, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_square() {
        // loss = x^2 at x = 3 -> grad 6.
        let mut g = Graph::new();
        let t = Tensor::scalar(3.0).with_requires_grad(true);
        let x = g.leaf(&t).unwrap();
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_unreached_leaf_gets_zero() {
        let mut g = Graph::new();
        let used = Tensor::scalar(2.0).with_requires_grad(true);
        let unused = Tensor::scalar(5.0).with_requires_grad(true);
        let x = g.leaf(&used).unwrap();
        let y = g.leaf(&unused).unwrap();
        let loss = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let t = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        let x = g.leaf(&t).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn ledger_is_deterministic_across_runs() {
        let run = || {
            let mut g = Graph::new();
            let a = g.constant(3, 4, (0..12).map(|i| i as f64).collect()).unwrap();
            let b = g.constant(4, 2, (0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
            let c = g.matmul(a, b, plabel()).unwrap();
            let _ = g.softmax(c, 1).unwrap();
            g.ledger().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attention_single_valid_key_equals_single_key_input() {
        let mut rng = crate::rng::Rng::new(11);
        let d = 4;
        let wq = Tensor::uniform(d, d, 0.5, &mut rng);
        let wk = Tensor::uniform(d, d, 0.5, &mut rng);
        let wv = Tensor::uniform(d, d, 0.5, &mut rng);
        let wo = Tensor::uniform(d, d, 0.5, &mut rng);
        let q = Tensor::uniform(2, d, 1.0, &mut rng);
        let keys = Tensor::uniform(3, d, 1.0, &mut rng);

        let run = |kv: &Tensor, mask: &[bool]| {
            let mut g = Graph::new();
            let qv = g.leaf(&q).unwrap();
            let kvv = g.leaf(kv).unwrap();
            let ws: Vec<Var> = [&wq, &wk, &wv, &wo].iter().map(|w| g.leaf(w).unwrap()).collect();
            let out = g
                .attention(qv, kvv, ws[0], ws[1], ws[2], ws[3], 2, mask, CostLabel::new(Phase::QueryDependent, OpTag::SelfAttention))
                .unwrap();
            g.value(out).to_vec()
        };

        let masked = run(&keys, &[false, true, false]);
        let only = Tensor::matrix(1, d, keys.row(1).to_vec()).unwrap();
        let direct = run(&only, &[true]);
        assert_eq!(masked, direct);
    }

    #[test]
    fn attention_all_keys_masked_errors() {
        let mut g = Graph::new();
        let q = g.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let kv = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let id = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = g
            .attention(q, kv, id, id, id, id, 1, &[false, false], CostLabel::new(Phase::QueryDependent, OpTag::SelfAttention))
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn attention_hand_oracle_one_head() {
        // q = [1,0], keys = values = [[1,0],[0,1]], identity projections.
        // scores = [1/sqrt(2), 0]; softmax = [0.6698, 0.3302].
        let mut g = Graph::new();
        let q = g.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let kv = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let id = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = g
            .attention(q, kv, id, id, id, id, 1, &[true, true], CostLabel::new(Phase::QueryDependent, OpTag::SelfAttention))
            .unwrap();
        let got = g.value(out);
        assert!((got[0] - 0.6698).abs() < 1e-4);
        assert!((got[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn lce_uniform_scores_is_log_group_size() {
        let mut g = Graph::new();
        let scores: Vec<Var> = (0..3).map(|_| g.constant(1, 1, vec![0.7]).unwrap()).collect();
        let loss = g.lce_loss(&scores, 0).unwrap();
        assert!((g.scalar_value(loss) - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lce_out_of_range_positive() {
        let mut g = Graph::new();
        let scores: Vec<Var> = (0..2).map(|_| g.constant(1, 1, vec![0.0]).unwrap()).collect();
        assert!(matches!(g.lce_loss(&scores, 2), Err(Error::Contract(_))));
    }
}
