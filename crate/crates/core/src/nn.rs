//! Transformer building blocks.
//!
//! Weight structs own plain tensors; `bind` copies them into a [`Graph`] as
//! leaves and returns the corresponding [`Var`] handles, so one set of
//! weights can serve many forward passes (and one training graph binds each
//! weight exactly once, letting gradients accumulate across uses).
//!
//! Layers use the post-norm order (residual, then layer norm) and GELU
//! (tanh form) activations. Linear layers carry no bias terms. There is no
//! dropout; forward passes are pure functions of inputs and weights.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ledger::{CostLabel, OpTag, Phase};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-head query/key/value/output projections, stored as full
/// `d_model x d_model` matrices with heads laid out in column blocks.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub head_count: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub head_count: usize,
}

impl AttentionWeights {
    pub fn init(d_model: usize, head_count: usize, rng: &mut Rng) -> Result<Self> {
        if head_count == 0 || d_model % head_count != 0 {
            return Err(Error::Config(format!(
                "head count {head_count} must divide model width {d_model}"
            )));
        }
        let scale = 1.0 / (d_model as f64).sqrt();
        Ok(AttentionWeights {
            wq: Tensor::uniform(d_model, d_model, scale, rng).with_requires_grad(true),
            wk: Tensor::uniform(d_model, d_model, scale, rng).with_requires_grad(true),
            wv: Tensor::uniform(d_model, d_model, scale, rng).with_requires_grad(true),
            wo: Tensor::uniform(d_model, d_model, scale, rng).with_requires_grad(true),
            head_count,
            head_dim: d_model / head_count,
        })
    }

    /// Initialization with query and key projections starting from the same
    /// draw. The score bilinear form is then positive semi-definite, so a
    /// query row prefers keys sharing its content direction from the first
    /// step (a content-lookup prior); training breaks the tie freely.
    pub fn init_tied_qk(d_model: usize, head_count: usize, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::init(d_model, head_count, rng)?;
        w.wk = w.wq.clone();
        Ok(w)
    }

    pub fn bind(&self, g: &mut Graph) -> Result<AttentionVars> {
        Ok(AttentionVars {
            wq: g.leaf(&self.wq)?,
            wk: g.leaf(&self.wk)?,
            wv: g.leaf(&self.wv)?,
            wo: g.leaf(&self.wo)?,
            head_count: self.head_count,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

impl AttentionVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// Two-layer position-wise feed-forward block, `d -> ffw -> d`.
#[derive(Debug, Clone)]
pub struct FeedForwardWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub w2: Var,
}

impl FeedForwardWeights {
    pub fn init(d_model: usize, ffw_width: usize, rng: &mut Rng) -> Self {
        FeedForwardWeights {
            w1: Tensor::uniform(d_model, ffw_width, 1.0 / (d_model as f64).sqrt(), rng)
                .with_requires_grad(true),
            w2: Tensor::uniform(ffw_width, d_model, 1.0 / (ffw_width as f64).sqrt(), rng)
                .with_requires_grad(true),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<FeedForwardVars> {
        Ok(FeedForwardVars {
            w1: g.leaf(&self.w1)?,
            w2: g.leaf(&self.w2)?,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.w2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.w2]
    }
}

/// Affine layer-norm parameters (gain and bias, each `1 x d`).
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormParams {
    pub fn init(d_model: usize) -> Self {
        LayerNormParams {
            gain: Tensor::matrix(1, d_model, vec![1.0; d_model])
                .expect("gain shape")
                .with_requires_grad(true),
            bias: Tensor::zeros(1, d_model).with_requires_grad(true),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<LayerNormVars> {
        Ok(LayerNormVars {
            gain: g.leaf(&self.gain)?,
            bias: g.leaf(&self.bias)?,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// One encoder layer: self-attention and feed-forward sublayers, each with
/// residual connection and post-norm.
#[derive(Debug, Clone)]
pub struct EncoderLayerWeights {
    pub self_attn: AttentionWeights,
    pub ffw: FeedForwardWeights,
    pub ln_attn: LayerNormParams,
    pub ln_ffw: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub self_attn: AttentionVars,
    pub ffw: FeedForwardVars,
    pub ln_attn: LayerNormVars,
    pub ln_ffw: LayerNormVars,
}

impl EncoderLayerWeights {
    pub fn init(d_model: usize, head_count: usize, ffw_width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderLayerWeights {
            self_attn: AttentionWeights::init(d_model, head_count, rng)?,
            ffw: FeedForwardWeights::init(d_model, ffw_width, rng),
            ln_attn: LayerNormParams::init(d_model),
            ln_ffw: LayerNormParams::init(d_model),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<EncoderLayerVars> {
        Ok(EncoderLayerVars {
            self_attn: self.self_attn.bind(g)?,
            ffw: self.ffw.bind(g)?,
            ln_attn: self.ln_attn.bind(g)?,
            ln_ffw: self.ln_ffw.bind(g)?,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.self_attn.params();
        out.extend(self.ffw.params());
        out.extend(self.ln_attn.params());
        out.extend(self.ln_ffw.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.self_attn.params_mut();
        out.extend(self.ffw.params_mut());
        out.extend(self.ln_attn.params_mut());
        out.extend(self.ln_ffw.params_mut());
        out
    }
}

/// One interaction (decoder-style) layer: query self-attention, then
/// query-to-memory cross attention, then feed-forward, each sublayer with
/// residual connection and post-norm.
#[derive(Debug, Clone)]
pub struct InteractionLayerWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub ffw: FeedForwardWeights,
    pub ln_self: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub ln_ffw: LayerNormParams,
}

#[derive(Debug, Clone, Copy)]
pub struct InteractionLayerVars {
    pub self_attn: AttentionVars,
    pub cross_attn: AttentionVars,
    pub ffw: FeedForwardVars,
    pub ln_self: LayerNormVars,
    pub ln_cross: LayerNormVars,
    pub ln_ffw: LayerNormVars,
}

impl InteractionLayerWeights {
    pub fn init(d_model: usize, head_count: usize, ffw_width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(InteractionLayerWeights {
            self_attn: AttentionWeights::init(d_model, head_count, rng)?,
            // Cross attention starts as a content lookup into the memory.
            cross_attn: AttentionWeights::init_tied_qk(d_model, head_count, rng)?,
            ffw: FeedForwardWeights::init(d_model, ffw_width, rng),
            ln_self: LayerNormParams::init(d_model),
            ln_cross: LayerNormParams::init(d_model),
            ln_ffw: LayerNormParams::init(d_model),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<InteractionLayerVars> {
        Ok(InteractionLayerVars {
            self_attn: self.self_attn.bind(g)?,
            cross_attn: self.cross_attn.bind(g)?,
            ffw: self.ffw.bind(g)?,
            ln_self: self.ln_self.bind(g)?,
            ln_cross: self.ln_cross.bind(g)?,
            ln_ffw: self.ln_ffw.bind(g)?,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.self_attn.params();
        out.extend(self.cross_attn.params());
        out.extend(self.ffw.params());
        out.extend(self.ln_self.params());
        out.extend(self.ln_cross.params());
        out.extend(self.ln_ffw.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.self_attn.params_mut();
        out.extend(self.cross_attn.params_mut());
        out.extend(self.ffw.params_mut());
        out.extend(self.ln_self.params_mut());
        out.extend(self.ln_cross.params_mut());
        out.extend(self.ln_ffw.params_mut());
        out
    }
}

/// Multi-head attention from `q_in` over `kv_in`, with MACs logged under
/// `label`. Thin wrapper over [`Graph::attention`].
pub fn attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    w: &AttentionVars,
    key_mask: &[bool],
    label: CostLabel,
) -> Result<Var> {
    g.attention(q_in, kv_in, w.wq, w.wk, w.wv, w.wo, w.head_count, key_mask, label)
}

/// Position-wise feed-forward with GELU, MACs under `FeedForward`.
pub fn feed_forward(g: &mut Graph, x: Var, w: &FeedForwardVars, phase: Phase) -> Result<Var> {
    let label = CostLabel::new(phase, OpTag::FeedForward);
    let h = g.matmul(x, w.w1, label)?;
    let h = g.gelu(h);
    g.matmul(h, w.w2, label)
}

/// Layer norm with bound parameters.
pub fn layer_norm(g: &mut Graph, x: Var, ln: &LayerNormVars) -> Result<Var> {
    g.layer_norm(x, ln.gain, ln.bias)
}

/// Encoder layer forward (post-norm).
pub fn encoder_layer(
    g: &mut Graph,
    x: Var,
    w: &EncoderLayerVars,
    mask: &[bool],
    phase: Phase,
) -> Result<Var> {
    let attn = attention(g, x, x, &w.self_attn, mask, CostLabel::new(phase, OpTag::SelfAttention))?;
    let res = g.add(x, attn)?;
    let h = layer_norm(g, res, &w.ln_attn)?;
    let ff = feed_forward(g, h, &w.ffw, phase)?;
    let res = g.add(h, ff)?;
    layer_norm(g, res, &w.ln_ffw)
}

/// Interaction layer forward: self-attention over the query state, cross
/// attention from the query state to `memory`, then feed-forward. Cross
/// attention is always charged as query-dependent work.
pub fn interaction_layer(
    g: &mut Graph,
    q_state: Var,
    memory: Var,
    w: &InteractionLayerVars,
    q_mask: &[bool],
    mem_mask: &[bool],
) -> Result<Var> {
    let (mem_rows, _) = g.shape(memory);
    if mem_rows == 0 || mem_mask.iter().all(|&m| !m) {
        return Err(Error::Contract("interaction layer with empty memory".into()));
    }
    let attn = attention(
        g,
        q_state,
        q_state,
        &w.self_attn,
        q_mask,
        CostLabel::new(Phase::QueryDependent, OpTag::SelfAttention),
    )?;
    let res = g.add(q_state, attn)?;
    let h = layer_norm(g, res, &w.ln_self)?;
    let cross = attention(
        g,
        h,
        memory,
        &w.cross_attn,
        mem_mask,
        CostLabel::new(Phase::QueryDependent, OpTag::CrossAttention),
    )?;
    let res = g.add(h, cross)?;
    let h = layer_norm(g, res, &w.ln_cross)?;
    let ff = feed_forward(g, h, &w.ffw, Phase::QueryDependent)?;
    let res = g.add(h, ff)?;
    layer_norm(g, res, &w.ln_ffw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(1, 4, vec![3.0; 4]).unwrap();
        let gain = g.constant(1, 4, vec![1.0; 4]).unwrap();
        let bias = g.constant(1, 4, vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for v in g.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::new();
        let x = g.constant(1, 2, vec![1.0, -1.0]).unwrap();
        let gain = g.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let bias = g.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let expect = 1.0 / (1.0 + 1e-5_f64).sqrt();
        assert!((g.value(y)[0] - expect).abs() < 1e-12);
        assert!((g.value(y)[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_random_row_moments() {
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = g.constant(1, 16, data).unwrap();
        let gain = g.constant(1, 16, vec![1.0; 16]).unwrap();
        let bias = g.constant(1, 16, vec![0.0; 16]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let out = g.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_uniform_over_identical_keys() {
        // Every key row identical: output must equal the single-key result
        // regardless of how many copies are attended to.
        let mut rng = Rng::new(21);
        let d = 4;
        let w = AttentionWeights::init(d, 2, &mut rng).unwrap();
        let q = Tensor::uniform(3, d, 1.0, &mut rng);
        let key_row: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let run = |copies: usize| {
            let mut g = Graph::new();
            let qv = g.leaf(&q).unwrap();
            let data: Vec<f64> = key_row.iter().cycle().take(copies * d).cloned().collect();
            let kv = g.constant(copies, d, data).unwrap();
            let wv = w.bind(&mut g).unwrap();
            let out = attention(
                &mut g,
                qv,
                kv,
                &wv,
                &vec![true; copies],
                CostLabel::new(Phase::QueryDependent, OpTag::SelfAttention),
            )
            .unwrap();
            g.value(out).to_vec()
        };

        let one = run(1);
        let five = run(5);
        for (a, b) in one.iter().zip(&five) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut rng = Rng::new(3);
        let w = EncoderLayerWeights::init(8, 2, 16, &mut rng).unwrap();
        for len in [1usize, 3, 7] {
            let mut g = Graph::new();
            let x = Tensor::uniform(len, 8, 1.0, &mut rng);
            let xv = g.leaf(&x).unwrap();
            let wv = w.bind(&mut g).unwrap();
            let y = encoder_layer(&mut g, xv, &wv, &vec![true; len], Phase::QueryIndependent).unwrap();
            assert_eq!(g.shape(y), (len, 8));
        }
    }

    #[test]
    fn interaction_layer_rejects_fully_masked_memory() {
        let mut rng = Rng::new(4);
        let w = InteractionLayerWeights::init(8, 2, 16, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = Tensor::uniform(2, 8, 1.0, &mut rng);
        let mem = Tensor::uniform(3, 8, 1.0, &mut rng);
        let qv = g.leaf(&q).unwrap();
        let mv = g.leaf(&mem).unwrap();
        let wv = w.bind(&mut g).unwrap();
        let err = interaction_layer(&mut g, qv, mv, &wv, &[true, true], &[false, false, false]);
        assert!(err.is_err());
    }
}
