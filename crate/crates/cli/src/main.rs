//! `normdiff`: batch front-end for simulation, exact analysis and
//! Monte-Carlo experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use commands::Context;
use config::RunConfig;

const CONFIG_HELP: &str = "\
Config file: `key = value` lines under [section] headers; `#` starts a comment.
Unknown sections and keys are rejected.

  [game]       a, b, c, d          payoffs; need a - d > b - c > 0 (A risk dominant)
               non_potential       true to accept c != d (exact analysis refuses it)
  [model]      beta                inverse noise: number, inf, or pilot (inertia, scaling)
  [graph]      family              cycle:N | line:N | complete:N | grid:RxC
               file                edge-list file, relative to the config file
  [scheduler]  kind                random | round-robin | periodic | adversary | contagion
               groups              periodic: vertex groups, e.g. 0,1,2; 2,3,4
               order               periodic: group order; adversary: vertex permutation
               r                   adversary: A-fraction to contain
               hammer              adversary: containing (default) | literal
               walk                contagion: lazy (default) | file
               start               contagion: first walker vertex
  [run]        stop                steps:T | fractionA:p | absorption
               budget              hard step (or subset) budget
               initial             all-b | all-a | bitstring (vertex 0 first, 1 = A)
               p                   inertia target: at least (1 - p) n playing A
               r, k                close-knit parameters; r also for adversary
               sizes               scaling sizes, e.g. 16,32,64,128
               replicas            Monte-Carlo replicas
               starts              random starts besides all-B (0 = all-B only)
               horizon             adversary steps per replica
               rounds              fairness rounds to observe
               seed                master seed (--seed overrides)

Exit codes: 0 success, 1 runtime error, 2 validation error, 3 capacity error,
4 every run censored.";

#[derive(Parser, Debug)]
#[command(
    name = "normdiff",
    version,
    about = "Log-linear norm diffusion on graphs: simulation, exact chains, experiments",
    after_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides [run] seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Output directory for CSV files
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run the dynamics once and write trace.csv
    Simulate,
    /// Exact stationary distribution of the configured chain (stationary.csv)
    ExactStationary,
    /// Stochastically stable states via minimum resistance trees (stable_states.csv)
    StableStates,
    /// Check (r, k)-close-knitness (close_knit.csv)
    CloseKnit,
    /// Monte-Carlo p-inertia (inertia.csv)
    Inertia,
    /// p-inertia across sizes with a log-log slope (inertia.csv, scaling.csv)
    Scaling,
    /// Containment by the adaptive adversary (containment.csv)
    Adversary,
    /// Round-length tails of the configured scheduler (fairness.csv)
    Fairness,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Capacity(String),
    /// Every Monte-Carlo run hit its budget; carries the summary.
    Censored(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::Censored(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Capacity(m) => write!(f, "capacity error: {m}"),
            CliError::Censored(m) => write!(f, "all runs censored:\n{m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<normdiff::Error> for CliError {
    fn from(e: normdiff::Error) -> Self {
        use normdiff::Error as E;
        match e {
            E::Capacity { .. } => CliError::Capacity(e.to_string()),
            E::Numerical(_) => CliError::Runtime(e.to_string()),
            E::Invalid(_) | E::Parse { .. } | E::NonPotential(_) | E::Reducible { .. } => {
                CliError::Validation(e.to_string())
            }
        }
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("--config PATH is required".into()))?;
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("--config {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Validation(format!("--config {}: not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(std::path::Path::new("."));
    let config = RunConfig::parse(&text, base)?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let hash = hex::encode(Sha256::digest(&bytes));
    let ctx = Context {
        config,
        seed,
        out_dir: cli.out.clone(),
        metadata: format!("# {} {}, {hash}, {seed}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::ExactStationary => commands::exact_stationary(&ctx),
        Command::StableStates => commands::stable_states_cmd(&ctx),
        Command::CloseKnit => commands::close_knit(&ctx),
        Command::Inertia => commands::inertia(&ctx),
        Command::Scaling => commands::scaling(&ctx),
        Command::Adversary => commands::adversary(&ctx),
        Command::Fairness => commands::fairness(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
