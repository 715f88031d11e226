//! End-to-end training checks: full-model gradient verification,
//! memorization, and loss identities.

mod common;

use mores::model::{ModelConfig, MoresModel};
use mores::rng::Rng;
use mores::train::{grad_check, train, TrainConfig, TrainingGroup};

fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 8,
        head_count: 2,
        encoder_layers: 2,
        interaction_layers: 2,
        ffw_width: 16,
        chunk_size: 8,
        max_chunks: 3,
        max_query_len: 4,
    }
}

fn random_group(seed: u64, doc_len: usize, negatives: usize) -> TrainingGroup {
    let mut rng = Rng::new(seed);
    let query: Vec<u32> = (0..3).map(|_| rng.below(32) as u32).collect();
    let mut doc = |len: usize| -> Vec<u32> { (0..len).map(|_| rng.below(32) as u32).collect() };
    let positive = doc(doc_len);
    let negs: Vec<Vec<u32>> = (0..negatives).map(|_| doc(doc_len)).collect();
    TrainingGroup::new(query, positive, negs).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = Rng::new(71);
    let model = MoresModel::init(toy_config(), &mut rng).unwrap();
    let group = random_group(5, 20, 2);
    let report = grad_check(&model, &group, 1e-5, 4, 9).unwrap();
    assert!(report.samples > 0);
    assert!(
        report.max_rel_err <= 1e-5,
        "max relative error {} (per tensor: {:?})",
        report.max_rel_err,
        report.per_tensor
    );
}

#[test]
fn frozen_tensors_are_excluded_from_grad_check() {
    let mut rng = Rng::new(72);
    let mut model = MoresModel::init(toy_config(), &mut rng).unwrap();
    model.token_embed.requires_grad = false;
    let group = random_group(6, 12, 1);
    let report = grad_check(&model, &group, 1e-5, 2, 3).unwrap();
    assert!(report.per_tensor.iter().all(|(name, _)| name != "token_embed"));
}

#[test]
fn coarser_steps_are_less_accurate() {
    let mut rng = Rng::new(73);
    let model = MoresModel::init(toy_config(), &mut rng).unwrap();
    let group = random_group(7, 12, 1);
    let coarse = grad_check(&model, &group, 1e-3, 3, 4).unwrap();
    let fine = grad_check(&model, &group, 1e-5, 3, 4).unwrap();
    assert!(
        coarse.max_rel_err > fine.max_rel_err,
        "coarse {} vs fine {}",
        coarse.max_rel_err,
        fine.max_rel_err
    );
}

#[test]
fn memorizes_a_small_group_set() {
    let mut rng = Rng::new(74);
    let model_config = ModelConfig {
        encoder_layers: 1,
        interaction_layers: 1,
        ..toy_config()
    };
    let mut model = MoresModel::init(model_config, &mut rng).unwrap();
    let groups: Vec<TrainingGroup> = (0..8).map(|i| random_group(200 + i, 12, 1)).collect();
    let config = TrainConfig {
        learning_rate: 5e-3,
        steps: 300,
        seed: 11,
        ..TrainConfig::default()
    };
    let outcome = train(&groups, &mut model, &config).unwrap();
    let final_losses = &outcome.loss_history[outcome.loss_history.len() - 8..];
    let final_mean: f64 = final_losses.iter().sum::<f64>() / 8.0;
    assert!(final_mean < 0.01, "final mean loss {final_mean}");
}

#[test]
fn lce_matches_independent_cross_entropy() {
    // Plain softmax cross-entropy, written directly.
    let reference = |scores: &[f64], positive: usize| -> f64 {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let p = (scores[positive] - max).exp() / denom;
        -p.ln()
    };
    let mut rng = Rng::new(75);
    for _ in 0..200 {
        let n = 2 + rng.below(7);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let positive = rng.below(n);
        let mut g = mores::Graph::new();
        let vars: Vec<_> = scores
            .iter()
            .map(|&s| g.constant(1, 1, vec![s]).unwrap())
            .collect();
        let loss = g.lce_loss(&vars, positive).unwrap();
        let got = g.scalar_value(loss);
        let want = reference(&scores, positive);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}
