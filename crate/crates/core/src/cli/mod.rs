//! Config-driven experiment runner behind the `genlearn` binary.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 numerical or I/O
//! failure (reported with the failing module), 4 a `repro --check` threshold
//! was missed.

pub mod commands;
pub mod config;
pub mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{Run, OUTPUT_ROOT_ENV};
pub use config::{ConfigIssue, ExperimentConfig};
pub use experiments::Check;

#[derive(Parser, Debug)]
#[command(name = "genlearn", version, about = "Energy-based spectral learning of diffusion generators")]
pub struct Cli {
    /// Run directory; overrides the output root and `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw invariant samples (samples.csv).
    Simulate { config: PathBuf },
    /// Fit the reduced-rank estimator (eigs.json and factor matrices).
    Fit { config: PathBuf },
    /// Fit and evaluate eigenfunctions on a grid (eigenfunctions.csv).
    Eigs { config: PathBuf },
    /// Metric distortion, spectral bias and oracle comparison (diagnostics.json).
    Diagnose { config: PathBuf },
    /// Finite-volume reference spectrum (oracle.csv, oracle.json).
    Oracle { config: PathBuf },
    /// Forecast the identity observable; RMSE curve when configured.
    Predict { config: PathBuf },
    /// Run a built-in experiment over all its seeds.
    Repro {
        experiment: Experiment,
        /// Use this config instead of the built-in preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keep only the first N seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Exit with status 4 when a threshold is missed.
        #[arg(long)]
        check: bool,
    },
    /// Print a built-in experiment config as TOML.
    Preset { experiment: Experiment },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Experiment {
    Fourwell,
    #[value(name = "muller_brown")]
    MullerBrown,
    Cir,
}

impl Experiment {
    pub fn preset_name(self) -> &'static str {
        match self {
            Experiment::Fourwell => "fourwell",
            Experiment::MullerBrown => "muller_brown",
            Experiment::Cir => "cir",
        }
    }
}

pub enum Failure {
    Config(Vec<ConfigIssue>),
    Runtime(crate::Error),
    Check(Vec<Check>),
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Config { path, message } => Failure::Config(vec![ConfigIssue { path, message }]),
            other => Failure::Runtime(other),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Check(_) => 4,
        }
    }
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    faer::set_global_parallelism(faer::Par::Seq);
    let started = SystemTime::now();
    let out = cli.out.as_deref();
    let (run, name) = match &cli.command {
        Command::Preset { experiment } => {
            print!("{}", config::preset_source(experiment.preset_name()).expect("built-in preset"));
            return Ok(());
        }
        Command::Repro { experiment, config, seeds, .. } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(p),
                None => ExperimentConfig::preset(experiment.preset_name()),
            }
            .map_err(Failure::Config)?;
            if let Some(k) = seeds {
                let all = cfg.repetition_seeds();
                cfg.seeds = all.into_iter().take((*k).max(1)).collect();
            }
            (Run::new(cfg, out)?, "repro")
        }
        Command::Simulate { config }
        | Command::Fit { config }
        | Command::Eigs { config }
        | Command::Diagnose { config }
        | Command::Oracle { config }
        | Command::Predict { config } => {
            let cfg = ExperimentConfig::load(config).map_err(Failure::Config)?;
            let name = match &cli.command {
                Command::Simulate { .. } => "simulate",
                Command::Fit { .. } => "fit",
                Command::Eigs { .. } => "eigs",
                Command::Diagnose { .. } => "diagnose",
                Command::Oracle { .. } => "oracle",
                _ => "predict",
            };
            (Run::new(cfg, out)?, name)
        }
    };
    let mut failed_checks = None;
    match &cli.command {
        Command::Simulate { .. } => run.simulate()?,
        Command::Fit { .. } => {
            run.fit_cmd()?;
        }
        Command::Eigs { .. } => run.eigs()?,
        Command::Diagnose { .. } => {
            run.diagnose()?;
        }
        Command::Oracle { .. } => {
            run.oracle_cmd()?;
        }
        Command::Predict { .. } => run.predict()?,
        Command::Repro { check, .. } => {
            let checks = run.repro()?;
            print_checks(&checks);
            if *check && checks.iter().any(|c| !c.passed) {
                failed_checks = Some(checks);
            }
        }
        Command::Preset { .. } => unreachable!(),
    }
    run.write_sidecar(name, started)?;
    println!("wrote {}", run.dir.display());
    match failed_checks {
        Some(c) => Err(Failure::Check(c)),
        None => Ok(()),
    }
}

/// Runs the CLI in-process on `args` (without the program name); returns the exit code.
pub fn run_args(args: &[&str]) -> u8 {
    let argv = std::iter::once("genlearn").chain(args.iter().copied());
    match Cli::try_parse_from(argv) {
        Ok(cli) => match execute(cli) {
            Ok(()) => 0,
            Err(f) => f.exit_code(),
        },
        Err(e) => {
            eprintln!("{e}");
            2
        }
    }
}

/// Parses arguments, runs, and maps failures to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(issues) => {
                    for i in issues {
                        eprintln!("config error: {i}");
                    }
                }
                Failure::Runtime(e) => eprintln!("error[{}]: {e}", e.module()),
                Failure::Check(checks) => {
                    let n = checks.iter().filter(|c| !c.passed).count();
                    eprintln!("{n} check(s) failed");
                }
            }
            ExitCode::from(f.exit_code())
        }
    }
}
