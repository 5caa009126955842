//! `certbnn`: train, attack and certify Bayesian neural networks from a config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] certbnn::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "config" | "usage" => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "certbnn", version, about = "Robust Bayesian neural networks with certified predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Posterior file (default: <out-dir>/posterior.bin).
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    /// Overrides `eval.epsilon`.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Overrides `eval.samples`.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a posterior; writes posterior.bin and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Clean, PGD and IBP-certified accuracy; writes certify.json and certify.csv.
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// PGD attack on the posterior ensemble; writes attack.json and attack.csv.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Maximal certified radius per test point; writes radius.json and radius.csv.
    Radius {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Predictive entropy in and out of distribution; writes uncertainty.json and CSVs.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Train { common }
        | Command::Certify { common, .. }
        | Command::Attack { common, .. }
        | Command::Radius { common, .. }
        | Command::Uncertainty { common, .. } => common.clone(),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let ctx = commands::Context::new(&common)?;
    match cli.command {
        Command::Train { .. } => commands::train(&ctx),
        Command::Certify { eval, .. } => commands::certify(&ctx, &eval),
        Command::Attack { eval, .. } => commands::attack(&ctx, &eval),
        Command::Radius { eval, .. } => commands::radius(&ctx, &eval),
        Command::Uncertainty { eval, .. } => commands::uncertainty(&ctx, &eval),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
