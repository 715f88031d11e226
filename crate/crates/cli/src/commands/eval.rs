//! `mores eval`: mean metric of a run file against qrels.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};
use mores::eval::{evaluate_run, read_qrels, read_run, Metric};

pub fn run(run_path: &Path, qrels_path: &Path, metric: Metric) -> Result<()> {
    let run = {
        let file = File::open(run_path).with_context(|| format!("cannot open {}", run_path.display()))?;
        read_run(BufReader::new(file)).with_context(|| format!("while parsing {}", run_path.display()))?
    };
    let (qrels, warnings) = {
        let file =
            File::open(qrels_path).with_context(|| format!("cannot open {}", qrels_path.display()))?;
        read_qrels(BufReader::new(file))
            .with_context(|| format!("while parsing {}", qrels_path.display()))?
    };
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    let report = evaluate_run(&run, &qrels, metric);
    if report.unjudged_queries > 0 {
        eprintln!(
            "warning: {} of {} queries have no judgments and contribute 0",
            report.unjudged_queries, report.query_count
        );
    }
    println!("{:.6}", report.mean);
    Ok(())
}
