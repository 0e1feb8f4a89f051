//! `proxytta`: dataset generation, the training stages, online adaptation,
//! baselines, analyses and reports, one verb per invocation.

mod commands;
mod jobs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "proxytta", version, about = "Online test-time adaptation for depth completion")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

/// Flags shared by every verb that resolves an experiment configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Name of the run directory under the runs root.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Validate and print the resolved configuration, then exit.
    #[arg(long)]
    pub dry_run: bool,
}

/// Flags of the verbs that continue from an earlier stage.
#[derive(Args, Debug, Clone, Default)]
pub struct Upstream {
    /// Checkpoint file or run directory to start from. Without it the
    /// upstream stages run in-process first.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Write the source, held-out and target splits as PNG datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the backbone on the source split.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Insert the adaptation layer and fit it on the source split.
    InitAdaptLayer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upstream: Upstream,
    },
    /// Train the proxy heads on the source split.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upstream: Upstream,
    },
    /// Adapt online over the target stream.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upstream: Upstream,
        /// proxytta or proxytta_fast (default: the configured method).
        #[arg(long)]
        method: Option<String>,
    },
    /// Run a comparison method over the target stream.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upstream: Upstream,
        /// no_adapt, bn_adapt, bn_adapt_lz_lsm or cotta.
        #[arg(long)]
        method: String,
    },
    /// Evaluate every input mode at every configured density.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upstream: Upstream,
        /// Worker processes for the independent evaluations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Centroid distances between source and target embedding clouds.
    Centroid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        upstream: Upstream,
    },
    /// Aggregate run directories into summary tables and loss plots.
    Report {
        /// Run directories to aggregate.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Worker processes for the per-run plots.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List the built-in presets, or write them as TOML files.
    Presets {
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Internal: one fanned-out job, given as JSON.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        job: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    match cli.verb {
        Verb::GenData { common, out } => c::gen_data(&common, out),
        Verb::Pretrain { common } => c::pretrain(&common),
        Verb::InitAdaptLayer { common, upstream } => c::init_adapt_layer(&common, &upstream),
        Verb::Prepare { common, upstream } => c::prepare(&common, &upstream),
        Verb::Adapt { common, upstream, method } => c::adapt(&common, &upstream, method.as_deref()),
        Verb::Baseline { common, upstream, method } => c::baseline(&common, &upstream, &method),
        Verb::Sensitivity { common, upstream, jobs } => c::sensitivity(&common, &upstream, jobs),
        Verb::Centroid { common, upstream } => c::centroid(&common, &upstream),
        Verb::Report { runs, out, jobs } => c::report(&runs, &out, jobs),
        Verb::Presets { write } => c::presets(write),
        Verb::Worker { job } => jobs::run_worker(&job),
    }
}

/// Exit status of an error: the category of the first library error in
/// the chain, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<proxytta_core::Error>())
        .map(|e| e.category().exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
