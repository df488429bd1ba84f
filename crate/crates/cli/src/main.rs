//! `fpf`: corpus generation, training, evaluation, pitch sweeps and the
//! gradient self-check.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing, corrupt or empty inputs), 3 numeric failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpf_core::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "fpf",
    version,
    about = "Formant/excitation text-to-spectrogram model with pitch control"
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides every seed (corpus, init, batching, split).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated semitone shifts for `sweep`, e.g. --lambda=-8,-4,0,4,8.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    lambda: Option<Vec<f64>>,

    /// Output file (gen-data, train, selfcheck) or directory (eval, sweep).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Dotted config override, e.g. --set train.max_iterations=500. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_defaults: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train a model, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Teacher-forced loss, MCD and FFE on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Synthesize under each pitch shift and score against λ = 0.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Gradient checks and metric oracles.
    Selfcheck,
}

/// Message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed, &cli.set)?;
    if cli.dump_defaults {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::usage("no command given; see --help"));
    };
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&cfg).expect("config serializes")
    );
    let out = cli.out.as_deref();
    match command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::Train { corpus, resume } => commands::train(&cfg, &corpus, resume.as_deref(), out),
        Command::Eval { checkpoint, corpus } => commands::eval(&cfg, &checkpoint, &corpus, out),
        Command::Sweep { checkpoint, corpus } => {
            commands::run_sweep(&cfg, &checkpoint, &corpus, cli.lambda.as_deref(), out)
        }
        Command::Selfcheck => commands::run_selfcheck(&cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
