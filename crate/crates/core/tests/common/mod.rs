//! Straight-line reference implementations used as oracles.
//!
//! Everything here recomputes forward passes with plain nested loops over
//! `Vec<Vec<f64>>` rows, independent of the graph engine under test. Heads
//! occupy column blocks, scores scale by 1/sqrt(head_dim), sublayers are
//! post-norm, activations are tanh-form GELU — the weight-layout contract
//! the oracle checks.

#![allow(dead_code)]

use mores::checkpoint::EncDecCheckpoint;
use mores::nn::{AttentionWeights, EncoderLayerWeights, InteractionLayerWeights};
use mores::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn gelu(x: &Mat) -> Mat {
    let coef = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|row| {
            row.iter()
                .map(|&v| 0.5 * v * (1.0 + (coef * (v + 0.044715 * v * v * v)).tanh()))
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let c = gain.len() as f64;
    x.iter()
        .map(|row| {
            let mean: f64 = row.iter().sum::<f64>() / c;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let istd = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, &v)| gain[j] * (v - mean) * istd + bias[j])
                .collect()
        })
        .collect()
}

pub fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

pub fn attention(q_in: &Mat, kv_in: &Mat, w: &AttentionWeights) -> Mat {
    let d = q_in[0].len();
    let heads = w.head_count;
    let hd = d / heads;
    let q = matmul(q_in, &rows_of(&w.wq));
    let k = matmul(kv_in, &rows_of(&w.wk));
    let v = matmul(kv_in, &rows_of(&w.wv));
    let mut ctx = vec![vec![0.0; d]; q_in.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, q_row) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|k_row| {
                    let dot: f64 = cols.clone().map(|c| q_row[c] * k_row[c]).sum();
                    dot / (hd as f64).sqrt()
                })
                .collect();
            let probs = softmax_row(&scores);
            for (j, v_row) in v.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] += probs[j] * v_row[c];
                }
            }
        }
    }
    matmul(&ctx, &rows_of(&w.wo))
}

pub fn encoder_layer(x: &Mat, w: &EncoderLayerWeights) -> Mat {
    let attn = attention(x, x, &w.self_attn);
    let h = layer_norm(&add(x, &attn), w.ln_attn.gain.row(0), w.ln_attn.bias.row(0));
    let ff = matmul(&gelu(&matmul(&h, &rows_of(&w.ffw.w1))), &rows_of(&w.ffw.w2));
    layer_norm(&add(&h, &ff), w.ln_ffw.gain.row(0), w.ln_ffw.bias.row(0))
}

pub fn interaction_layer(q: &Mat, memory: &Mat, w: &InteractionLayerWeights) -> Mat {
    let attn = attention(q, q, &w.self_attn);
    let h = layer_norm(&add(q, &attn), w.ln_self.gain.row(0), w.ln_self.bias.row(0));
    let cross = attention(&h, memory, &w.cross_attn);
    let h = layer_norm(&add(&h, &cross), w.ln_cross.gain.row(0), w.ln_cross.bias.row(0));
    let ff = matmul(&gelu(&matmul(&h, &rows_of(&w.ffw.w1))), &rows_of(&w.ffw.w2));
    layer_norm(&add(&h, &ff), w.ln_ffw.gain.row(0), w.ln_ffw.bias.row(0))
}

pub fn embed(token_embed: &Tensor, pos_embed: &Tensor, row_ids: &[usize]) -> Mat {
    row_ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            token_embed
                .row(id)
                .iter()
                .zip(pos_embed.row(pos))
                .map(|(t, p)| t + p)
                .collect()
        })
        .collect()
}

/// Reference encoder-decoder forward: encode the document, decode
/// `CLS;query` against it, project the decoder CLS row.
pub fn encdec_score(ckpt: &EncDecCheckpoint, doc_tokens: &[u32], query_tokens: &[u32]) -> f64 {
    let doc_ids: Vec<usize> = doc_tokens.iter().map(|&t| t as usize).collect();
    let mut enc = embed(&ckpt.token_embed, &ckpt.pos_embed, &doc_ids);
    for layer in &ckpt.encoder {
        enc = encoder_layer(&enc, layer);
    }
    let cls = ckpt.config.vocab_size;
    let mut dec_ids = vec![cls];
    dec_ids.extend(query_tokens.iter().map(|&t| t as usize));
    let mut dec = embed(&ckpt.token_embed, &ckpt.pos_embed, &dec_ids);
    for layer in &ckpt.decoder {
        dec = interaction_layer(&dec, &enc, layer);
    }
    dec[0]
        .iter()
        .zip(ckpt.v_proj.data())
        .map(|(h, v)| h * v)
        .sum()
}

/// Relative error with an absolute floor, for oracle comparisons.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
