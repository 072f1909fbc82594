use std::path::PathBuf;
use std::process::ExitCode;

use chargenoise_cli::commands::{self, Context, InferSource};
use chargenoise_cli::config::ExperimentConfig;
use chargenoise_cli::{CliError, CliResult, EXIT_USAGE};
use clap::{Args, Parser, Subcommand};

/// Seeded simulation and analysis of charge-noise spectroscopy experiments.
#[derive(Parser, Debug)]
#[command(name = "chargenoise", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir` (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample charges, simulate jumps and write raw sweeps.
    Simulate,
    /// Fit a sweeps file and write traces, statistics and curves.
    Analyze {
        /// Sweeps file (default: OUT/sweeps.csv).
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Correlation time and amplitude versus optical power.
    SweepPower,
    /// Normalized jump rate versus auxiliary focus position.
    ScanFocus,
    /// Mean frequency and amplitude versus electrode voltage, with a
    /// charge-free control.
    ScanVoltage,
    /// Build (or reuse) the non-Gaussianity calibration curve.
    Calibrate,
    /// Estimate the charge density from a measured non-Gaussianity.
    Infer {
        /// Non-Gaussianity value to invert.
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        eta: Option<f64>,
        /// Sweeps or frequency-trace file.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        /// Calibration file (default: OUT/calibration.csv, built if missing).
        #[arg(long, value_name = "PATH")]
        calibration: Option<PathBuf>,
    },
    /// Cross-correlation of probe pairs versus separation.
    Correlate,
}

fn run(cli: Cli) -> CliResult<String> {
    let jobs = match cli.global.jobs {
        Some(0) => return Err(CliError::config("--jobs must be >= 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| CliError::config(format!("worker pool: {e}")))?;
    let cfg = match &cli.global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Context::new(cfg, cli.global.seed, cli.global.out, jobs);
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Analyze { input } => commands::analyze(&ctx, input.as_deref()),
        Command::SweepPower => commands::sweep_power(&ctx),
        Command::ScanFocus => commands::scan_focus(&ctx),
        Command::ScanVoltage => commands::scan_voltage(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Infer { eta, input, calibration } => {
            let source = match (eta, input) {
                (Some(e), _) => InferSource::Eta(e),
                (None, Some(p)) => InferSource::Data(p),
                (None, None) => return Err(CliError::config("infer needs --eta or --input")),
            };
            commands::infer(&ctx, &source, calibration.as_deref())
        }
        Command::Correlate => commands::correlate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
