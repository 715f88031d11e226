//! `mores gradcheck`: compare analytic model gradients against central
//! finite differences on a seeded random training group.

use anyhow::{bail, Result};
use mores::model::MoresModel;
use mores::rng::Rng;
use mores::train::{grad_check, TrainingGroup};

use crate::commands::{model_config_from, MODEL_KEYS, TRAIN_KEYS};
use crate::config::Config;

const EXTRA_KEYS: [&str; 3] = ["seed", "step", "samples_per_tensor"];

pub fn run(config: &Config, threshold: Option<f64>) -> Result<()> {
    // Accept (and ignore) optimizer keys so a train config can be reused.
    let known: Vec<&str> = MODEL_KEYS
        .iter()
        .chain(TRAIN_KEYS.iter())
        .chain(EXTRA_KEYS.iter())
        .copied()
        .collect();
    config.check_known_keys(&known)?;
    let model_config = model_config_from(config)?;
    let seed = config.u64_or("seed", 0)?;
    let step = config.f64_or("step", 1e-5)?;
    let samples = config.usize_or("samples_per_tensor", 8)?;

    let mut rng = Rng::new(seed);
    let model = MoresModel::init(model_config.clone(), &mut rng)?;

    // One full-length group: documents spanning every chunk slot.
    let doc_len = model_config.chunk_size * model_config.max_chunks;
    let query_len = model_config.max_query_len.min(4);
    let query: Vec<u32> = (0..query_len)
        .map(|_| rng.below(model_config.vocab_size) as u32)
        .collect();
    let mut doc = |len: usize| -> Vec<u32> {
        (0..len).map(|_| rng.below(model_config.vocab_size) as u32).collect()
    };
    let positive = doc(doc_len);
    let negatives = vec![doc(doc_len), doc(doc_len)];
    let group = TrainingGroup::new(query, positive, negatives)?;

    let report = grad_check(&model, &group, step, samples, seed)?;
    eprintln!(
        "gradcheck: {} sampled coordinates across {} tensors",
        report.samples,
        report.per_tensor.len()
    );
    println!("{:.6e}", report.max_rel_err);
    if let Some(limit) = threshold {
        if report.max_rel_err > limit {
            bail!("max relative error {:.6e} exceeds threshold {limit:.6e}", report.max_rel_err);
        }
    }
    Ok(())
}
