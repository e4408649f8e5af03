//! Command-line experiment runner: pulse synthesis, protocol sweeps, loss
//! analysis, scaling fits, and numerical self-checks, all driven by a flat
//! key-value configuration with deterministic CSV/JSON outputs.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Errors carrying their process exit code: 2 validation, 3 convergence,
/// 4 numerical consistency, 1 anything else.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Convergence(String),
    Numerical(String),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "validation error: {msg}"),
            CliError::Convergence(msg) => write!(f, "convergence failure: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical-consistency failure: {msg}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<revmet::Error> for CliError {
    fn from(e: revmet::Error) -> Self {
        use revmet::Error as E;
        match e {
            E::NumericalConsistency(_)
            | E::NotUnitary { .. }
            | E::NotHermitian { .. }
            | E::NonMonotone { .. }
            | E::JumpGuard { .. }
            | E::Linalg(_) => CliError::Numerical(e.to_string()),
            E::Io(io) => CliError::Io(io),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "revmet",
    about = "Time-reversal phase estimation: pulse synthesis, protocol sweeps, \
             photon-loss analysis, and scaling fits",
    version
)]
struct Cli {
    /// Configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Resource photon number N (overrides the config file).
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the φ sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the synthesis pulse for the configured N (cached by content).
    Synthesize {
        /// Solve the four-pair loss-adapted problem instead of the
        /// closed-system one.
        #[arg(long)]
        adapted: bool,
    },
    /// Sweep the phase-estimation protocol and write CSV plus a JSON summary.
    Protocol {
        /// Use an exact completion of the defining mappings instead of an
        /// optimized pulse.
        #[arg(long)]
        exact: bool,
        /// Explicit pulse file (defaults to the cache entry for this config).
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Sweep the lossy protocol: simulated and closed-form uncertainty,
    /// mixed-state Fisher information, and measurement-based recovery.
    Loss {
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Run the protocol for N = 1..n and fit the scaling of 1/δφ and F.
    Scaling {
        #[arg(long)]
        exact: bool,
        #[arg(long)]
        pulse: Option<PathBuf>,
    },
    /// Cross-check the numerical machinery against independent oracles.
    Verify,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.n {
        config.n = Some(n);
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    config.validate()?;

    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot size the worker pool: {e}")))?;
    }

    match cli.command {
        Command::Synthesize { adapted } => commands::cmd_synthesize(&config, adapted),
        Command::Protocol { exact, pulse } => {
            commands::cmd_protocol(&config, exact, pulse.as_deref())
        }
        Command::Loss { exact, pulse } => commands::cmd_loss(&config, exact, pulse.as_deref()),
        Command::Scaling { exact, pulse } => {
            commands::cmd_scaling(&config, exact, pulse.as_deref())
        }
        Command::Verify => commands::cmd_verify(&config),
    }
}

fn main() -> ExitCode {
    // For the matrix sizes of this workload a threaded BLAS only adds
    // synchronization overhead, and the φ sweeps parallelize above BLAS.
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
