mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunelab::kernels::set_threads;
use prunelab::{Criterion, Error, PhaseOrder, Result};

/// Train, score, prune, benchmark and report on small residual CNNs.
#[derive(Debug, Parser)]
#[command(name = "prunelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a baseline model and write `baseline.prlb`.
    Train(Common),
    /// Write per-filter and per-block importance tables.
    Score(Common),
    /// Run the hybrid channel + layer pipeline on a checkpoint.
    Prune(Common),
    /// Time inference of a checkpoint.
    Bench(BenchArgs),
    /// Join all artifacts in the output directory into result tables.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input checkpoint; defaults to `baseline.prlb` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Importance criterion: wm, bn, fmr or taylor.
    #[arg(long)]
    criterion: Option<Criterion>,
    /// Number of blocks to remove.
    #[arg(long)]
    blocks: Option<usize>,
    /// Phase order: cl (channels then layers) or lc.
    #[arg(long)]
    order: Option<PhaseOrder>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = prunelab::metrics::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = prunelab::metrics::DEFAULT_PASSES)]
    passes: usize,
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("PRUNELAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::config(
                    "PRUNELAB_THREADS",
                    format!("expected a positive integer, got `{v}`"),
                )
            }),
    }
}

fn run(cli: Cli) -> Result<()> {
    set_threads(threads_from_env()?);
    match cli.command {
        Command::Train(c) => commands::train(&c.into()),
        Command::Score(c) => commands::score(&c.into()),
        Command::Prune(c) => commands::prune(&c.into()),
        Command::Bench(b) => commands::bench(&b.common.into(), b.batch_size, b.warmup, b.passes),
        Command::Report(c) => commands::report(&c.into()),
    }
}

impl From<Common> for commands::Options {
    fn from(c: Common) -> Self {
        commands::Options {
            config: c.config,
            seed: c.seed,
            out: c.out,
            checkpoint: c.checkpoint,
            criterion: c.criterion,
            blocks: c.blocks,
            order: c.order,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
