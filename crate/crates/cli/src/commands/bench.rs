//! `mores bench`: sweep the attention-cost grid and verify predictions
//! against instrumented forward passes.

use std::path::Path;

use anyhow::{Context, Result};
use mores::cost::{run_grid, write_csv, GridConfig, System};

use crate::commands::{finish, writer_for};
use crate::config::{Config, Manifest};

const KEYS: [&str; 10] = [
    "systems",
    "chunk_sizes",
    "query_rows",
    "doc_multipliers",
    "d_model",
    "head_count",
    "encoder_layers",
    "interaction_layers",
    "aggregator_layers",
    "seed",
];

fn grid_from(config: &Config) -> Result<GridConfig> {
    config.check_known_keys(&KEYS)?;
    let defaults = GridConfig::default();
    let systems = match config.get("systems") {
        None => defaults.systems,
        Some(spec) => spec
            .split(',')
            .map(|s| s.trim().parse::<System>().map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()
            .context("while parsing `systems`")?,
    };
    Ok(GridConfig {
        systems,
        chunk_sizes: config.usize_list_or("chunk_sizes", &defaults.chunk_sizes)?,
        query_rows: config.usize_list_or("query_rows", &defaults.query_rows)?,
        doc_multipliers: config.usize_list_or("doc_multipliers", &defaults.doc_multipliers)?,
        d_model: config.usize_or("d_model", defaults.d_model)?,
        head_count: config.usize_or("head_count", defaults.head_count)?,
        encoder_layers: config.usize_or("encoder_layers", defaults.encoder_layers)?,
        interaction_layers: config.usize_or("interaction_layers", defaults.interaction_layers)?,
        aggregator_layers: config.usize_or("aggregator_layers", defaults.aggregator_layers)?,
        seed: config.u64_or("seed", defaults.seed)?,
    })
}

pub fn run(config: &Config, out_csv: &Path) -> Result<()> {
    let grid = grid_from(config)?;
    let rows = run_grid(&grid)?;
    let mut w = writer_for(out_csv)?;
    write_csv(&mut w, &rows)?;
    finish(w)?;

    let max_delta = rows.iter().map(|r| r.delta()).max().unwrap_or(0);
    let mut manifest = Manifest::new("bench");
    manifest
        .config(config)
        .entry("seed", grid.seed)
        .entry("output.csv", out_csv.display())
        .entry("grid_points", rows.len())
        .entry("max_delta", max_delta)
        .entry(
            "resolved.systems",
            grid.systems
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        )
        .entry("resolved.d_model", grid.d_model)
        .entry("resolved.head_count", grid.head_count)
        .entry("resolved.encoder_layers", grid.encoder_layers)
        .entry("resolved.interaction_layers", grid.interaction_layers)
        .entry("resolved.aggregator_layers", grid.aggregator_layers);
    manifest.write_for(out_csv)?;

    println!("bench: {} grid points, max_delta={max_delta} -> {}", rows.len(), out_csv.display());
    Ok(())
}
