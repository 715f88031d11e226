//! `mores synth`: generate a synthetic corpus, queries, qrels, and
//! training groups.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mores::synth::{generate_corpus, NeedlePlacement, SynthConfig};
use mores::{eval, train};

use crate::config::{Config, Manifest};
use crate::commands::{finish, writer_for};

const KEYS: [&str; 9] = [
    "vocab_size",
    "doc_len",
    "chunk_size",
    "query_len",
    "needle_chunks",
    "queries",
    "candidates_per_query",
    "positives_per_query",
    "seed",
];

fn placement_from(value: Option<&str>) -> Result<NeedlePlacement> {
    match value {
        None | Some("uniform") => Ok(NeedlePlacement::Uniform),
        Some(spec) => {
            let chunks: Vec<usize> = spec
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .with_context(|| format!("needle_chunks item {s:?} is not an integer"))
                })
                .collect::<Result<Vec<_>>>()?;
            if chunks.is_empty() {
                bail!("needle_chunks lists no chunk indices");
            }
            Ok(NeedlePlacement::Chunks(chunks))
        }
    }
}

pub fn run(config: &Config, out_dir: &Path) -> Result<()> {
    config.check_known_keys(&KEYS)?;
    let synth_config = SynthConfig {
        vocab_size: config.usize_or("vocab_size", 64)?,
        doc_len: config.usize_or("doc_len", 64)?,
        chunk_size: config.usize_or("chunk_size", 16)?,
        query_len: config.usize_or("query_len", 4)?,
        placement: placement_from(config.get("needle_chunks"))?,
        queries: config.usize_or("queries", 100)?,
        candidates_per_query: config.usize_or("candidates_per_query", 8)?,
        positives_per_query: config.usize_or("positives_per_query", 1)?,
        seed: config.u64_or("seed", 0)?,
    };
    let data = generate_corpus(&synth_config)?;

    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let corpus_path = out_dir.join("corpus.tsv");
    let queries_path = out_dir.join("queries.tsv");
    let qrels_path = out_dir.join("qrels.txt");
    let groups_path = out_dir.join("groups.tsv");

    let mut w = writer_for(&corpus_path)?;
    mores::synth::write_documents(&mut w, &data.corpus)?;
    finish(w)?;
    let mut w = writer_for(&queries_path)?;
    mores::synth::write_documents(&mut w, &data.queries)?;
    finish(w)?;
    let mut w = writer_for(&qrels_path)?;
    eval::write_qrels(&mut w, &data.qrels)?;
    finish(w)?;
    let mut w = writer_for(&groups_path)?;
    train::write_groups(&mut w, &data.groups)?;
    finish(w)?;

    let mut manifest = Manifest::new("synth");
    manifest
        .config(config)
        .entry("seed", synth_config.seed)
        .entry("resolved.vocab_size", synth_config.vocab_size)
        .entry("resolved.doc_len", synth_config.doc_len)
        .entry("resolved.chunk_size", synth_config.chunk_size)
        .entry("resolved.query_len", synth_config.query_len)
        .entry(
            "resolved.needle_chunks",
            match &synth_config.placement {
                NeedlePlacement::Uniform => "uniform".to_string(),
                NeedlePlacement::Chunks(c) => c
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            },
        )
        .entry("resolved.queries", synth_config.queries)
        .entry("resolved.candidates_per_query", synth_config.candidates_per_query)
        .entry("resolved.positives_per_query", synth_config.positives_per_query)
        .entry("output.corpus", corpus_path.display())
        .entry("output.queries", queries_path.display())
        .entry("output.qrels", qrels_path.display())
        .entry("output.groups", groups_path.display());
    manifest.write_for(out_dir)?;

    println!(
        "synth: {} docs, {} queries, {} groups -> {}",
        data.corpus.len(),
        data.queries.len(),
        data.groups.len(),
        out_dir.display()
    );
    Ok(())
}
