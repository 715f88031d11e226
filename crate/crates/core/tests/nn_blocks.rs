//! Block-level checks: straight-line oracle agreement, exact pad
//! invariance, and attention MAC accounting.

mod common;

use common::rel_err;
use mores::graph::Graph;
use mores::ledger::{CostLabel, OpLedger, OpTag, Phase};
use mores::nn::{
    attention, encoder_layer, interaction_layer, AttentionWeights, EncoderLayerWeights,
    InteractionLayerWeights,
};
use mores::rng::Rng;
use mores::tensor::Tensor;
use proptest::prelude::*;

const D: usize = 8;
const HEADS: usize = 2;
const FFW: usize = 16;

fn cross_label() -> CostLabel {
    CostLabel::new(Phase::QueryDependent, OpTag::CrossAttention)
}

#[test]
fn encoder_layer_matches_straight_line_oracle() {
    let mut rng = Rng::new(51);
    let w = EncoderLayerWeights::init(D, HEADS, FFW, &mut rng).unwrap();
    for len in [1usize, 4] {
        let x = Tensor::uniform(len, D, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x).unwrap();
        let wv = w.bind(&mut g).unwrap();
        let out = encoder_layer(&mut g, xv, &wv, &vec![true; len], Phase::QueryIndependent).unwrap();
        let got = g.value(out);
        let want = common::encoder_layer(&common::rows_of(&x), &w);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(rel_err(got[i * D + j], *v) <= 1e-12, "L={len} ({i},{j})");
            }
        }
    }
}

#[test]
fn interaction_layer_matches_straight_line_oracle() {
    let mut rng = Rng::new(52);
    let w = InteractionLayerWeights::init(D, HEADS, FFW, &mut rng).unwrap();
    for (lq, lm) in [(1usize, 1usize), (3, 5)] {
        let q = Tensor::uniform(lq, D, 1.0, &mut rng);
        let mem = Tensor::uniform(lm, D, 1.0, &mut rng);
        let mut g = Graph::new();
        let qv = g.leaf(&q).unwrap();
        let mv = g.leaf(&mem).unwrap();
        let wv = w.bind(&mut g).unwrap();
        let out = interaction_layer(&mut g, qv, mv, &wv, &vec![true; lq], &vec![true; lm]).unwrap();
        let got = g.value(out);
        let want = common::interaction_layer(&common::rows_of(&q), &common::rows_of(&mem), &w);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(rel_err(got[i * D + j], *v) <= 1e-12, "Lq={lq} Lm={lm} ({i},{j})");
            }
        }
    }
}

#[test]
fn masked_memory_prefix_equals_sliced_memory() {
    let mut rng = Rng::new(53);
    let w = InteractionLayerWeights::init(D, HEADS, FFW, &mut rng).unwrap();
    let q = Tensor::uniform(2, D, 1.0, &mut rng);
    let mem = Tensor::uniform(5, D, 1.0, &mut rng);
    let prefix = Tensor::matrix(3, D, mem.data()[..3 * D].to_vec()).unwrap();

    let run = |memory: &Tensor, mask: &[bool]| {
        let mut g = Graph::new();
        let qv = g.leaf(&q).unwrap();
        let mv = g.leaf(memory).unwrap();
        let wv = w.bind(&mut g).unwrap();
        let out = interaction_layer(&mut g, qv, mv, &wv, &[true, true], mask).unwrap();
        g.value(out).to_vec()
    };

    let masked = run(&mem, &[true, true, true, false, false]);
    let sliced = run(&prefix, &[true, true, true]);
    assert_eq!(masked, sliced);
}

#[test]
fn cross_attention_macs_are_exactly_linear_in_key_count() {
    let mut rng = Rng::new(54);
    let w = AttentionWeights::init(D, HEADS, &mut rng).unwrap();
    let lq = 3;
    let q = Tensor::uniform(lq, D, 1.0, &mut rng);

    let macs_for = |lk: usize| -> (u64, u64) {
        let kv = Tensor::uniform(lk, D, 1.0, &mut Rng::new(lk as u64));
        let mut g = Graph::new();
        let qv = g.leaf(&q).unwrap();
        let kvv = g.leaf(&kv).unwrap();
        let wv = w.bind(&mut g).unwrap();
        attention(&mut g, qv, kvv, &wv, &vec![true; lk], cross_label()).unwrap();
        let ledger: &OpLedger = g.ledger();
        (
            ledger.get(Phase::QueryDependent, OpTag::CrossAttention),
            ledger.phase_total(Phase::QueryDependent),
        )
    };

    let mut prev_total = None;
    for lk in [1usize, 2, 5, 9] {
        let (cross, total) = macs_for(lk);
        // Score product + weighted sum: exactly 2 * Lq * Lk * d.
        assert_eq!(cross, (2 * lq * lk * D) as u64);
        // Projections add Lq*d^2 (queries), 2*Lk*d^2 (keys/values), Lq*d^2 (output).
        assert_eq!(total, cross + ((2 * lq + 2 * lk) * D * D) as u64);
        if let Some((plk, ptotal)) = prev_total {
            let slope = (total - ptotal) / ((lk - plk) as u64);
            assert_eq!(slope, (2 * lq * D + 2 * D * D) as u64);
        }
        prev_total = Some((lk, total));
    }
}

#[test]
fn blocks_are_pure_functions() {
    let mut rng = Rng::new(55);
    let w = EncoderLayerWeights::init(D, HEADS, FFW, &mut rng).unwrap();
    let x = Tensor::uniform(4, D, 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.leaf(&x).unwrap();
        let wv = w.bind(&mut g).unwrap();
        let out = encoder_layer(&mut g, xv, &wv, &[true; 4], Phase::QueryIndependent).unwrap();
        (g.value(out).to_vec(), g.ledger().clone())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Appending masked pad rows never changes unmasked outputs, bit for bit.
    #[test]
    fn pad_invariance_is_exact(seed in 0u64..10_000, pads in 1usize..4) {
        let mut rng = Rng::new(seed);
        let w = EncoderLayerWeights::init(D, HEADS, FFW, &mut rng).unwrap();
        let iw = InteractionLayerWeights::init(D, HEADS, FFW, &mut rng).unwrap();
        let len = 1 + rng.below(4);
        let x = Tensor::uniform(len, D, 1.0, &mut rng);
        let mem = Tensor::uniform(3, D, 1.0, &mut rng);

        // Pad rows carry garbage values; only the mask marks them dead.
        let mut padded_data = x.data().to_vec();
        for _ in 0..pads * D {
            padded_data.push(rng.uniform(-100.0, 100.0));
        }
        let padded = Tensor::matrix(len + pads, D, padded_data).unwrap();
        let mut mask = vec![true; len];
        mask.extend(std::iter::repeat(false).take(pads));

        let enc = |input: &Tensor, mask: &[bool]| {
            let mut g = Graph::new();
            let xv = g.leaf(input).unwrap();
            let wv = w.bind(&mut g).unwrap();
            let out = encoder_layer(&mut g, xv, &wv, mask, Phase::QueryIndependent).unwrap();
            g.value(out)[..len * D].to_vec()
        };
        prop_assert_eq!(enc(&x, &vec![true; len]), enc(&padded, &mask));

        // Same property for the query side of the interaction layer.
        let inter = |input: &Tensor, mask: &[bool]| {
            let mut g = Graph::new();
            let qv = g.leaf(input).unwrap();
            let mv = g.leaf(&mem).unwrap();
            let wv = iw.bind(&mut g).unwrap();
            let out = interaction_layer(&mut g, qv, mv, &wv, mask, &[true, true, true]).unwrap();
            g.value(out)[..len * D].to_vec()
        };
        prop_assert_eq!(inter(&x, &vec![true; len]), inter(&padded, &mask));
    }
}
