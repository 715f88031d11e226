//! Subcommand implementations.

pub mod bench;
pub mod encode;
pub mod eval;
pub mod gradcheck;
pub mod rank;
pub mod synth;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mores::model::ModelConfig;
use mores::synth::Document;
use mores::train::TrainConfig;

use crate::config::{Config, Manifest};

pub const MODEL_KEYS: [&str; 9] = [
    "vocab_size",
    "d_model",
    "head_count",
    "encoder_layers",
    "interaction_layers",
    "ffw_width",
    "chunk_size",
    "max_chunks",
    "max_query_len",
];

pub const TRAIN_KEYS: [&str; 7] = [
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "steps",
    "seed",
    "max_negatives",
];

/// Architecture settings with documented defaults.
pub fn model_config_from(config: &Config) -> Result<ModelConfig> {
    let d_model = config.usize_or("d_model", 32)?;
    let mc = ModelConfig {
        vocab_size: config.usize_or("vocab_size", 64)?,
        d_model,
        head_count: config.usize_or("head_count", 2)?,
        encoder_layers: config.usize_or("encoder_layers", 2)?,
        interaction_layers: config.usize_or("interaction_layers", 2)?,
        ffw_width: config.usize_or("ffw_width", 4 * d_model)?,
        chunk_size: config.usize_or("chunk_size", 16)?,
        max_chunks: config.usize_or("max_chunks", 4)?,
        max_query_len: config.usize_or("max_query_len", 8)?,
    };
    mc.validate()?;
    Ok(mc)
}

pub fn train_config_from(config: &Config) -> Result<TrainConfig> {
    let tc = TrainConfig {
        learning_rate: config.f64_or("learning_rate", 3e-4)?,
        beta1: config.f64_or("beta1", 0.9)?,
        beta2: config.f64_or("beta2", 0.999)?,
        epsilon: config.f64_or("epsilon", 1e-8)?,
        steps: config.usize_or("steps", 1000)?,
        seed: config.u64_or("seed", 0)?,
        max_negatives: match config.get("max_negatives") {
            Some(v) => Some(
                v.parse()
                    .with_context(|| format!("max_negatives = {v:?} is not an integer"))?,
            ),
            None => None,
        },
    };
    tc.validate()?;
    Ok(tc)
}

pub fn manifest_model(manifest: &mut Manifest, mc: &ModelConfig) {
    manifest
        .entry("resolved.vocab_size", mc.vocab_size)
        .entry("resolved.d_model", mc.d_model)
        .entry("resolved.head_count", mc.head_count)
        .entry("resolved.encoder_layers", mc.encoder_layers)
        .entry("resolved.interaction_layers", mc.interaction_layers)
        .entry("resolved.ffw_width", mc.ffw_width)
        .entry("resolved.chunk_size", mc.chunk_size)
        .entry("resolved.max_chunks", mc.max_chunks)
        .entry("resolved.max_query_len", mc.max_query_len);
}

pub fn read_documents_file(path: &Path) -> Result<Vec<Document>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    mores::synth::read_documents(BufReader::new(file))
        .with_context(|| format!("while parsing {}", path.display()))
}

pub fn writer_for(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

pub fn finish<W: Write>(mut w: BufWriter<W>) -> Result<()> {
    w.flush().context("flushing output")?;
    Ok(())
}

/// Run `f` inside a rayon pool of `threads` workers when `threads > 1`.
/// Per-item work is independent, so results do not depend on the pool size.
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads <= 1 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("building worker pool")?
            .install(f)
    }
}
