//! `mores train`: fit a model on a corpus and group file.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mores::model::MoresModel;
use mores::rng::Rng;
use mores::synth::corpus_map;
use mores::train::{read_groups, train, TrainingGroup};

use crate::commands::{
    finish, manifest_model, model_config_from, read_documents_file, train_config_from, writer_for,
    MODEL_KEYS, TRAIN_KEYS,
};
use crate::config::{Config, Manifest};

pub fn run(corpus_path: &Path, groups_path: &Path, config: &Config, out_model: &Path) -> Result<()> {
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS.iter()).copied().collect();
    config.check_known_keys(&known)?;
    let model_config = model_config_from(config)?;
    let train_config = train_config_from(config)?;

    let corpus = read_documents_file(corpus_path)?;
    let corpus = corpus_map(&corpus)?;
    let records = {
        let file = File::open(groups_path)
            .with_context(|| format!("cannot open {}", groups_path.display()))?;
        read_groups(BufReader::new(file))
            .with_context(|| format!("while parsing {}", groups_path.display()))?
    };
    let groups: Vec<TrainingGroup> = records
        .iter()
        .map(|r| r.resolve(&corpus).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;

    let mut model = MoresModel::init(model_config.clone(), &mut Rng::new(train_config.seed))?;
    let outcome = train(&groups, &mut model, &train_config)?;
    model.save(out_model)?;

    let loss_path = {
        let mut name = out_model.as_os_str().to_owned();
        name.push(".loss.csv");
        std::path::PathBuf::from(name)
    };
    let mut w = writer_for(&loss_path)?;
    writeln!(w, "step,loss")?;
    for (step, loss) in outcome.loss_history.iter().enumerate() {
        writeln!(w, "{step},{loss:.12e}")?;
    }
    finish(w)?;

    let mut manifest = Manifest::new("train");
    manifest
        .config(config)
        .entry("seed", train_config.seed)
        .entry("input.corpus", corpus_path.display())
        .entry("input.groups", groups_path.display())
        .entry("output.model", out_model.display())
        .entry("output.loss_csv", loss_path.display())
        .entry("resolved.learning_rate", train_config.learning_rate)
        .entry("resolved.beta1", train_config.beta1)
        .entry("resolved.beta2", train_config.beta2)
        .entry("resolved.epsilon", train_config.epsilon)
        .entry("resolved.steps", train_config.steps)
        .entry(
            "resolved.max_negatives",
            train_config
                .max_negatives
                .map(|m| m.to_string())
                .unwrap_or_else(|| "all".to_string()),
        )
        .entry("groups", groups.len());
    manifest_model(&mut manifest, &model_config);
    manifest.write_for(out_model)?;

    let last = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "train: {} steps over {} groups, final loss {last:.6} -> {}",
        outcome.loss_history.len(),
        groups.len(),
        out_model.display()
    );
    Ok(())
}
