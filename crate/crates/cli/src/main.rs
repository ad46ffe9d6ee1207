//! `rscope`: offline library building and online sensing experiments.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rscope_core::{Error, ErrorClass, Execution, Result};

use config::{Experiment, RunArgs};

#[derive(Parser)]
#[command(name = "rscope", version, about = "DMD regime libraries and time-augmented sparse-sensing classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite (train/test snapshot files and a manifest)
    /// into --out, or the config's data directory.
    Synth {
        /// Suite description (TOML); defaults to the built-in suite.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Decompose every training set and write a regime library into --out,
    /// or the config's library directory.
    BuildLib(RunArgs),
    /// Write the sensing operator, observed bases and their coherence.
    Observe(RunArgs),
    /// Classify random test windows; one row per trial.
    Classify(RunArgs),
    /// Reconstruct test windows with every regime and compare errors.
    Reconstruct(RunArgs),
    /// Subspace alignment, energy and coherence metrics of a library.
    Metrics(RunArgs),
    /// Monte-Carlo confusion matrix in percent.
    Confusion(RunArgs),
    /// Block coherence for j = 0..=J.
    MuBSweep(RunArgs),
    /// Confusion matrices over a grid of sensor counts, depths and noise levels.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    sensing: Option<rscope_core::sensing::SensingKind>,
    /// Comma-separated sensor counts.
    #[arg(long, value_delimiter = ',')]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pt: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pv: Vec<usize>,
    #[arg(long)]
    sensor_seed: Option<u64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    snr_db: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    j: Vec<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    held_out: bool,
}

impl SweepArgs {
    fn run_args(&self) -> RunArgs {
        RunArgs {
            config: self.config.clone(),
            library: self.library.clone(),
            data: self.data.clone(),
            sensing: self.sensing,
            sensor_seed: self.sensor_seed,
            trials: self.trials,
            seed: self.seed,
            out: self.out.clone(),
            held_out: self.held_out,
            ..Default::default()
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(text) = std::env::var("RSCOPE_THREADS") {
        let n: usize = text
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Argument(format!("RSCOPE_THREADS={text:?} is not a positive integer")))?;
        rscope_core::parallel::init_thread_pool(n);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let exec = Execution::default();
    match cli.command {
        Command::Synth { suite, run } => {
            let exp = Experiment::resolve(&run)?;
            let dest = run.out.or(exp.data.clone()).ok_or_else(|| {
                Error::Argument("no destination given (--out or data in config)".into())
            })?;
            commands::synth(&exp, suite.as_deref(), &dest, exec)
        }
        Command::BuildLib(a) => {
            let exp = Experiment::resolve(&a)?;
            let dest = a.out.or(exp.library.clone()).ok_or_else(|| {
                Error::Argument("no destination given (--out or library in config)".into())
            })?;
            commands::build_lib(&exp, &dest, exec)
        }
        Command::Observe(a) => commands::observe(&Experiment::resolve(&a)?, exec),
        Command::Classify(a) => commands::classify_cmd(&Experiment::resolve(&a)?, exec),
        Command::Reconstruct(a) => commands::reconstruct_cmd(&Experiment::resolve(&a)?, exec),
        Command::Metrics(a) => commands::metrics(&Experiment::resolve(&a)?, exec),
        Command::Confusion(a) => commands::confusion(&Experiment::resolve(&a)?, exec),
        Command::MuBSweep(a) => commands::mu_b_sweep(&Experiment::resolve(&a)?, exec),
        Command::Sweep(a) => {
            let exp = Experiment::resolve(&a.run_args())?;
            let grid = commands::SweepGrid {
                p: a.p,
                pt: a.pt,
                pv: a.pv,
                j: a.j,
                snr_db: a.snr_db,
            };
            if grid.snr_db.iter().any(|x| x.is_nan()) {
                return Err(Error::Argument("snr-db must be a number or inf".into()));
            }
            commands::sweep(&exp, &grid, exec)
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Argument(_) => "argument",
        Error::Format(_) => "format",
        Error::Version { .. } => "version",
        Error::Rank(_) => "rank",
        Error::Singular(_) => "singular",
        Error::DegenerateSignal(_) => "degenerate_signal",
        Error::Numerical(_) => "numerical",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, code) = match e.class() {
                ErrorClass::Usage => ("usage", 2),
                ErrorClass::Format => ("format", 3),
                ErrorClass::Numerical => ("numerical", 4),
            };
            eprintln!("error: class={class} kind={} message={:?}", error_kind(&e), e.to_string());
            ExitCode::from(code)
        }
    }
}
