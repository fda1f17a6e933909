//! `gearbox-cbm`: simulate SCADA data, cluster operating modes, monitor the
//! generator/rotor speed ratio for drift, and render reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cbm_core::drift::Pooling;
use cbm_core::mixture::SelectionRule;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;
use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gearbox-cbm", version, about = "Gearbox condition monitoring from 10-minute SCADA data")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads. Outputs do not depend on this value.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic SCADA files and their ground truth.
    Simulate {
        /// Comma-separated turbine ids.
        #[arg(long, value_delimiter = ',')]
        turbines: Option<Vec<String>>,
        /// Comma-separated calendar years.
        #[arg(long, value_delimiter = ',')]
        years: Option<Vec<i32>>,
    },
    /// Sweep mixture sizes, fit and label operating modes per turbine.
    Cluster {
        #[command(flatten)]
        data: DataArgs,
        /// Smallest mixture size in the sweep.
        #[arg(long)]
        k_min: Option<usize>,
        /// Largest mixture size in the sweep.
        #[arg(long)]
        k_max: Option<usize>,
        /// Mixture size used by fixed-k selection.
        #[arg(long)]
        fixed_k: Option<usize>,
        /// How the reported model is chosen from the sweep.
        #[arg(long, value_enum)]
        selection: Option<Selection>,
    },
    /// Fit per-mode speed-ratio lines and chart weekly residuals for drift.
    Monitor {
        #[command(flatten)]
        data: DataArgs,
        /// Mixture size used by fixed-k selection.
        #[arg(long)]
        fixed_k: Option<usize>,
        /// How the operating-mode model is chosen.
        #[arg(long, value_enum)]
        selection: Option<Selection>,
        /// One chart per turbine, or one per turbine and mode.
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        /// Modes whose ratio fit has a lower R² are not monitored.
        #[arg(long)]
        r2_threshold: Option<f64>,
    },
    /// Rebuild report.json and report.txt from the summaries in the output directory.
    Report,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// SCADA CSV files (repeatable); replaces data.inputs.
    #[arg(long = "input", value_name = "PATH")]
    inputs: Vec<PathBuf>,
    /// Calendar year used to fit models and chart limits.
    #[arg(long)]
    train_year: Option<i32>,
    /// Calendar year scored against the training charts.
    #[arg(long)]
    validate_year: Option<i32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Selection {
    MinAic,
    FixedK,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pooled,
    PerMode,
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if !self.inputs.is_empty() {
            cfg.data.inputs = self.inputs;
        }
        if let Some(y) = self.train_year {
            cfg.data.train_year = y;
        }
        if let Some(y) = self.validate_year {
            cfg.data.validate_year = y;
        }
    }
}

fn apply_selection(cfg: &mut RunConfig, fixed_k: Option<usize>, selection: Option<Selection>) {
    if let Some(k) = fixed_k {
        cfg.cluster.fixed_k = k;
    }
    if let Some(s) = selection {
        cfg.cluster.selection = match s {
            Selection::MinAic => SelectionRule::MinAic,
            Selection::FixedK => SelectionRule::FixedK,
        };
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(out) = cli.output {
        cfg.output = out;
    }
    match cli.command {
        Command::Simulate { turbines, years } => {
            if let Some(t) = turbines {
                cfg.simulate.turbines = t;
            }
            if let Some(y) = years {
                cfg.simulate.years = y;
            }
            with_pool(&cfg, commands::simulate)
        }
        Command::Cluster {
            data,
            k_min,
            k_max,
            fixed_k,
            selection,
        } => {
            data.apply(&mut cfg);
            if let Some(k) = k_min {
                cfg.cluster.k_min = k;
            }
            if let Some(k) = k_max {
                cfg.cluster.k_max = k;
            }
            apply_selection(&mut cfg, fixed_k, selection);
            with_pool(&cfg, commands::cluster)
        }
        Command::Monitor {
            data,
            fixed_k,
            selection,
            pooling,
            r2_threshold,
        } => {
            data.apply(&mut cfg);
            apply_selection(&mut cfg, fixed_k, selection);
            if let Some(p) = pooling {
                cfg.monitor.pooling = match p {
                    PoolingArg::Pooled => Pooling::Pooled,
                    PoolingArg::PerMode => Pooling::PerMode,
                };
            }
            if let Some(t) = r2_threshold {
                cfg.monitor.r2_threshold = t;
            }
            with_pool(&cfg, commands::monitor)
        }
        Command::Report => with_pool(&cfg, commands::report),
    }
}

/// Validates the configuration and runs `f` on a pool of `cfg.jobs` threads.
fn with_pool(cfg: &RunConfig, f: fn(&RunConfig) -> Result<(), CliError>) -> Result<(), CliError> {
    cfg.validate()?;
    let jobs = cfg
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| f(cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
