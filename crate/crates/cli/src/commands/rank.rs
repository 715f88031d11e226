//! `mores rank`: re-rank per-query candidate pools from a representation
//! cache and emit a TREC run file.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mores::cache::{rank_with_cache, ReprCache};
use mores::eval::{write_run, RunEntry};
use mores::ledger::OpLedger;
use mores::model::MoresModel;
use mores::train::read_groups;
use rayon::prelude::*;

use crate::commands::{finish, read_documents_file, with_pool, writer_for};
use crate::config::Manifest;

/// Candidate pools come from a group file: for each qid, the positive and
/// negative doc ids of its groups, first-seen order, deduplicated.
fn candidate_pools(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let records = read_groups(BufReader::new(file))
        .with_context(|| format!("while parsing {}", path.display()))?;
    let mut pools: HashMap<String, Vec<String>> = HashMap::new();
    for record in records {
        let pool = pools.entry(record.qid.clone()).or_default();
        for id in std::iter::once(&record.pos_doc_id).chain(record.neg_doc_ids.iter()) {
            if !pool.contains(id) {
                pool.push(id.clone());
            }
        }
    }
    Ok(pools)
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    queries_path: &Path,
    candidates_path: &Path,
    cache_path: &Path,
    model_path: &Path,
    out_run: &Path,
    max_chunks: Option<usize>,
    tag: &str,
    threads: usize,
) -> Result<()> {
    let model = MoresModel::load(model_path)?;
    let cache = ReprCache::load(cache_path, &model.fingerprint())?;
    let queries = read_documents_file(queries_path)?;
    let pools = candidate_pools(candidates_path)?;

    for query in &queries {
        if !pools.contains_key(&query.id) {
            bail!("query {} has no candidates in {}", query.id, candidates_path.display());
        }
    }

    // Queries are independent; the pool size cannot change scores.
    let rankings = with_pool(threads, || {
        queries
            .par_iter()
            .map(|query| {
                let mut ledger = OpLedger::new();
                let ranked = rank_with_cache(
                    &query.tokens,
                    &pools[&query.id],
                    &cache,
                    &model,
                    max_chunks,
                    &mut ledger,
                )?;
                Ok((query.id.clone(), ranked))
            })
            .collect::<mores::Result<Vec<_>>>()
            .map_err(anyhow::Error::from)
    })?;

    let mut entries = Vec::new();
    for (qid, ranked) in &rankings {
        for (pos, scored) in ranked.iter().enumerate() {
            entries.push(RunEntry::new(qid, &scored.doc_id, (pos + 1) as u32, scored.score, tag));
        }
    }
    let mut w = writer_for(out_run)?;
    write_run(&mut w, &entries)?;
    finish(w)?;

    let mut manifest = Manifest::new("rank");
    manifest
        .entry("input.queries", queries_path.display())
        .entry("input.candidates", candidates_path.display())
        .entry("input.cache", cache_path.display())
        .entry("input.model", model_path.display())
        .entry("output.run", out_run.display())
        .entry("tag", tag)
        .entry(
            "max_chunks",
            max_chunks.map(|k| k.to_string()).unwrap_or_else(|| "all".to_string()),
        )
        .entry("threads", threads)
        .entry("queries", queries.len());
    manifest.write_for(out_run)?;

    println!(
        "rank: {} queries, {} run lines -> {}",
        queries.len(),
        entries.len(),
        out_run.display()
    );
    Ok(())
}
