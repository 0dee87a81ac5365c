use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use dlj_core::experiments::{parse_config, run_experiment, write_outputs, ExperimentError};

/// Runs a distributed Löwner-John or filtering experiment from a JSON config.
#[derive(Debug, Parser)]
#[command(name = "dlj", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Oracle cadence in rounds for consensus runs.
    #[arg(long)]
    oracle_every: Option<usize>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

fn run(cli: &Cli) -> Result<bool, ExperimentError> {
    let text = std::fs::read_to_string(&cli.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(every) = cli.oracle_every {
        cfg.oracle_every = every;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output));
    let report = run_experiment(&cfg)?;
    let (csv, summary) = write_outputs(&report, &out)?;
    if !cli.quiet {
        println!("{}", serde_json::to_string_pretty(&report.summary).expect("summary serializes"));
        eprintln!("wrote {} and {}", csv.display(), summary.display());
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: {}", ExperimentError::CheckFailed("see summary.json".into()));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
