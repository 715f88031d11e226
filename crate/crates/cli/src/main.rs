//! One binary driving the whole pipeline: synthetic data, training,
//! offline encoding, ranking, evaluation, cost benchmarking, and gradient
//! checking. Results go to stdout, diagnostics to stderr, and every
//! run writes a manifest next to its outputs. Exit code is 0 on success
//! and 1 on any error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::Config;
use mores::eval::Metric;

#[derive(Parser)]
#[command(name = "mores", version, about = "Modular long-document re-ranker pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, queries, qrels, and training groups.
    Synth {
        /// Key-value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the four data files and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model with the group-contrastive objective.
    Train {
        /// Corpus file (id<TAB>tokens).
        #[arg(long)]
        corpus: PathBuf,
        /// Training-group file.
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model file; the loss CSV lands at <out>.loss.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Precompute document representations into a cache file.
    Encode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 1 keeps a single deterministic worker.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Re-rank cached candidates and write a TREC run file.
    Rank {
        /// Query file (id<TAB>tokens).
        #[arg(long)]
        queries: PathBuf,
        /// Group file supplying each query's candidate pool.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score only the first K chunks of every document.
        #[arg(long)]
        max_chunks: Option<usize>,
        /// Run tag written into the TREC file.
        #[arg(long, default_value = "mores")]
        tag: String,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Mean metric of a run file against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Metric selector, e.g. ndcg@20 or mrr@100.
        #[arg(long)]
        metric: String,
    },
    /// Verify the analytic attention-cost model against measured MACs.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fail (exit 1) if the max relative error exceeds this bound.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::from_file(p),
        None => Ok(Config::empty()),
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.set("seed", seed.to_string());
            }
            commands::synth::run(&cfg, &out)
        }
        Command::Train {
            corpus,
            groups,
            config,
            out,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.set("seed", seed.to_string());
            }
            commands::train::run(&corpus, &groups, &cfg, &out)
        }
        Command::Encode {
            corpus,
            model,
            out,
            threads,
        } => commands::encode::run(&corpus, &model, &out, threads),
        Command::Rank {
            queries,
            candidates,
            cache,
            model,
            out,
            max_chunks,
            tag,
            threads,
        } => commands::rank::run(
            &queries,
            &candidates,
            &cache,
            &model,
            &out,
            max_chunks,
            &tag,
            threads,
        ),
        Command::Eval { run, qrels, metric } => {
            let metric: Metric = metric.parse()?;
            commands::eval::run(&run, &qrels, metric)
        }
        Command::Bench { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.set("seed", seed.to_string());
            }
            commands::bench::run(&cfg, &out)
        }
        Command::Gradcheck {
            config,
            seed,
            threshold,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.set("seed", seed.to_string());
            }
            commands::gradcheck::run(&cfg, threshold)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Keep exit codes to 0/1; clap would exit 2 on usage errors.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::FAILURE;
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
