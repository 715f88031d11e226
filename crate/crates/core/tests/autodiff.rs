//! Gradient correctness of the graph engine against central finite
//! differences, plus ledger and softmax invariants.

mod common;

use mores::graph::{Graph, Var};
use mores::ledger::{CostLabel, OpTag, Phase};
use mores::rng::Rng;
use mores::tensor::Tensor;
use proptest::prelude::*;

fn label() -> CostLabel {
    CostLabel::new(Phase::QueryDependent, OpTag::Projection)
}

/// Central finite difference of `f` w.r.t. one coordinate of `inputs[which]`.
fn central_diff(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    coord: usize,
    step: f64,
) -> f64 {
    let eval = |delta: f64| {
        let mut perturbed = inputs.to_vec();
        let mut data = perturbed[which].data().to_vec();
        data[coord] += delta;
        let shape = perturbed[which].shape().to_vec();
        perturbed[which] = Tensor::new(shape, data).unwrap();
        f(&perturbed)
    };
    (eval(step) - eval(-step)) / (2.0 * step)
}

/// Check every analytic gradient of `build` against finite differences.
fn assert_grads_match(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t).unwrap()).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();

    let value_fn = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| {
                let frozen = t.clone().with_requires_grad(false);
                g.leaf(&frozen).unwrap()
            })
            .collect();
        let loss = build(&mut g, &vars);
        g.scalar_value(loss)
    };

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = g.grad(vars[which]).expect("gradient");
        for coord in 0..input.numel() {
            let numeric = central_diff(&value_fn, inputs, which, coord, 1e-5);
            worst = worst.max(common::rel_err(analytic[coord], numeric));
        }
    }
    assert!(worst <= tol, "max relative gradient error {worst}");
}

#[test]
fn two_layer_network_gradients_match_finite_differences() {
    let mut rng = Rng::new(41);
    let x = Tensor::uniform(1, 4, 2.0, &mut rng).with_requires_grad(true);
    let w1 = Tensor::uniform(4, 8, 1.0, &mut rng).with_requires_grad(true);
    let w2 = Tensor::uniform(8, 1, 1.0, &mut rng).with_requires_grad(true);
    assert_grads_match(&[x, w1, w2], &|g, v| {
        let h = g.matmul(v[0], v[1], label()).unwrap();
        let h = g.gelu(h);
        let out = g.matmul(h, v[2], label()).unwrap();
        g.sum(out)
    }, 1e-5);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = Rng::new(42);
    let d = 6;
    let q = Tensor::uniform(3, d, 1.5, &mut rng).with_requires_grad(true);
    let kv = Tensor::uniform(4, d, 1.5, &mut rng).with_requires_grad(true);
    let wq = Tensor::uniform(d, d, 0.7, &mut rng).with_requires_grad(true);
    let wk = Tensor::uniform(d, d, 0.7, &mut rng).with_requires_grad(true);
    let wv = Tensor::uniform(d, d, 0.7, &mut rng).with_requires_grad(true);
    let wo = Tensor::uniform(d, d, 0.7, &mut rng).with_requires_grad(true);
    let weight = Tensor::uniform(3, d, 1.0, &mut rng);
    let inputs = vec![q, kv, wq, wk, wv, wo, weight];
    // One masked key exercises the masked backward path.
    assert_grads_match(&inputs, &|g, v| {
        let out = g
            .attention(v[0], v[1], v[2], v[3], v[4], v[5], 2, &[true, true, false, true], label())
            .unwrap();
        let weighted = g.mul(out, v[6]).unwrap();
        g.sum(weighted)
    }, 1e-5);
}

#[test]
fn layer_norm_and_softmax_gradients_match_finite_differences() {
    let mut rng = Rng::new(43);
    let x = Tensor::uniform(3, 5, 2.0, &mut rng).with_requires_grad(true);
    let gain = Tensor::uniform(1, 5, 1.0, &mut rng).with_requires_grad(true);
    let bias = Tensor::uniform(1, 5, 0.5, &mut rng).with_requires_grad(true);
    let weight = Tensor::uniform(3, 5, 1.0, &mut rng);
    assert_grads_match(&[x, gain, bias, weight], &|g, v| {
        let ln = g.layer_norm(v[0], v[1], v[2]).unwrap();
        let sm = g.softmax(ln, 1).unwrap();
        let weighted = g.mul(sm, v[3]).unwrap();
        g.sum(weighted)
    }, 1e-5);
}

#[test]
fn gather_concat_row_lce_gradients_match_finite_differences() {
    let mut rng = Rng::new(44);
    let table = Tensor::uniform(6, 4, 1.0, &mut rng).with_requires_grad(true);
    let head = Tensor::uniform(4, 1, 1.0, &mut rng).with_requires_grad(true);
    assert_grads_match(&[table, head], &|g, v| {
        // Repeated ids exercise scatter accumulation.
        let a = g.gather_rows(v[0], &[0, 2, 2]).unwrap();
        let b = g.gather_rows(v[0], &[5, 1]).unwrap();
        let stacked = g.concat_rows(&[a, b]).unwrap();
        let r0 = g.row(stacked, 0).unwrap();
        let r3 = g.row(stacked, 3).unwrap();
        let s0 = g.matmul(r0, v[1], label()).unwrap();
        let s1 = g.matmul(r3, v[1], label()).unwrap();
        g.lce_loss(&[s0, s1], 0).unwrap()
    }, 1e-5);
}

#[test]
fn finite_difference_step_tradeoff() {
    // A coarser step gives a worse (truncation-dominated) estimate.
    let mut rng = Rng::new(45);
    let x = Tensor::uniform(1, 4, 2.0, &mut rng).with_requires_grad(true);
    let w = Tensor::uniform(4, 1, 1.0, &mut rng).with_requires_grad(true);
    let build = |g: &mut Graph, v: &[Var]| {
        let h = g.matmul(v[0], v[1], label()).unwrap();
        let h = g.gelu(h);
        g.sum(h)
    };
    let mut g = Graph::new();
    let inputs = vec![x, w];
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t).unwrap()).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic = g.grad(vars[0]).unwrap()[1];

    let value_fn = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t).unwrap()).collect();
        let loss = build(&mut g, &vars);
        g.scalar_value(loss)
    };
    let err = |step: f64| (central_diff(&value_fn, &inputs, 0, 1, step) - analytic).abs();
    assert!(err(1e-3) > err(1e-5), "coarse {} vs fine {}", err(1e-3), err(1e-5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composed_ops_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let a = Tensor::uniform(2, 3, 2.0, &mut rng).with_requires_grad(true);
        let b = Tensor::uniform(3, 4, 2.0, &mut rng).with_requires_grad(true);
        let gain = Tensor::uniform(1, 4, 1.0, &mut rng).with_requires_grad(true);
        let bias = Tensor::uniform(1, 4, 1.0, &mut rng).with_requires_grad(true);
        let mix = Tensor::uniform(2, 4, 2.0, &mut rng);
        assert_grads_match(&[a, b, gain, bias, mix], &|g, v| {
            let prod = g.matmul(v[0], v[1], label()).unwrap();
            let act = g.gelu(prod);
            let ln = g.layer_norm(act, v[2], v[3]).unwrap();
            let sm = g.softmax(ln, 1).unwrap();
            let weighted = g.mul(sm, v[4]).unwrap();
            let scaled = g.scale(weighted, 1.7);
            g.sum(scaled)
        }, 1e-5);
    }

    #[test]
    fn softmax_slices_sum_to_one(seed in 0u64..10_000, axis in 0usize..2) {
        let mut rng = Rng::new(seed);
        let rows = 1 + rng.below(5);
        let cols = 1 + rng.below(6);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(rows, cols, data).unwrap();
        let y = g.softmax(x, axis).unwrap();
        let out = g.value(y);
        let (slices, len, stride, step) = if axis == 1 { (rows, cols, cols, 1) } else { (cols, rows, 1, cols) };
        for s in 0..slices {
            let total: f64 = (0..len).map(|i| out[s * stride + i * step]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!((0..len).all(|i| out[s * stride + i * step] >= 0.0));
        }
    }

    #[test]
    fn ledger_counts_are_reproducible(seed in 0u64..10_000) {
        let run = |seed: u64| {
            let mut rng = Rng::new(seed);
            let mut g = Graph::new();
            let a = g.constant(3, 4, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let b = g.constant(4, 5, (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let wq = g.constant(5, 5, (0..25).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let c = g.matmul(a, b, label()).unwrap();
            let _ = g
                .attention(c, c, wq, wq, wq, wq, 1, &[true, true, true],
                           CostLabel::new(Phase::QueryIndependent, OpTag::SelfAttention))
                .unwrap();
            g.ledger().clone()
        };
        prop_assert_eq!(run(seed), run(seed));
    }
}
