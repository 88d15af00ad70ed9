use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use dapt_bench::cli::{run_experiment, ExperimentConfig, TableFormat, Task};

/// Runs a DAPT / fine-tuning / ablation experiment from a TOML config.
#[derive(Debug, Parser)]
#[command(name = "dapt-bench", version)]
struct Args {
    /// Experiment kind; overrides `task` in the config file.
    task: Task,

    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,

    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Output root; falls back to DAPT_BENCH_OUT, then the config.
    #[arg(long, env = "DAPT_BENCH_OUT")]
    out: Option<PathBuf>,

    #[arg(long, value_enum)]
    format: Option<TableFormat>,
}

fn run(args: Args) -> dapt_bench::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.task = args.task;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(f) = args.format {
        cfg.format = f;
    }
    let outcome = run_experiment(&cfg)?;
    eprintln!(
        "{}: {} cells trained, {} reused",
        outcome.root.display(),
        outcome.trained,
        outcome.skipped
    );
    if let Some(path) = &outcome.table_path {
        eprintln!("table written to {}", path.display());
    }
    if let Some(text) = &outcome.table_text {
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
