//! `mores encode`: precompute document representations into a cache file.

use std::path::Path;

use anyhow::Result;
use mores::cache::ReprCache;
use mores::ledger::{OpLedger, Phase};
use mores::model::MoresModel;
use rayon::prelude::*;

use crate::commands::{read_documents_file, with_pool};
use crate::config::Manifest;

pub fn run(corpus_path: &Path, model_path: &Path, out_cache: &Path, threads: usize) -> Result<()> {
    let model = MoresModel::load(model_path)?;
    let corpus = read_documents_file(corpus_path)?;

    // Documents encode independently; parallel order cannot change results.
    let encoded = with_pool(threads, || {
        corpus
            .par_iter()
            .map(|doc| {
                let mut ledger = OpLedger::new();
                let enc = model.encode_document(&doc.id, &doc.tokens, &mut ledger)?;
                Ok((enc, ledger))
            })
            .collect::<mores::Result<Vec<_>>>()
            .map_err(anyhow::Error::from)
    })?;

    let mut total = OpLedger::new();
    let mut docs = Vec::with_capacity(encoded.len());
    for (doc, ledger) in encoded {
        total.merge(&ledger);
        docs.push(doc);
    }
    let cache = ReprCache::from_documents(&model, docs)?;
    cache.save(out_cache)?;

    let mut manifest = Manifest::new("encode");
    manifest
        .entry("input.corpus", corpus_path.display())
        .entry("input.model", model_path.display())
        .entry("output.cache", out_cache.display())
        .entry("documents", cache.len())
        .entry("threads", threads)
        .entry(
            "model_fingerprint",
            hex_string(model.fingerprint().as_slice()),
        )
        .entry(
            "query_independent_macs",
            total.phase_total(Phase::QueryIndependent),
        );
    manifest.write_for(out_cache)?;

    println!("encode: {} documents -> {}", cache.len(), out_cache.display());
    Ok(())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
