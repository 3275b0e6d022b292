//! Command-line front end. Exit codes: 0 success, 1 usage or config error,
//! 2 runtime failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    ablation_means, cmd_ablate, cmd_eval, cmd_gen_data, cmd_generate, cmd_probe, cmd_train, write_json,
    AblationRow, AblationSummary, DataIndex, GenerateResult, Outputs, SeedTraining, SuiteFile, SweepEntry,
    TauSweep,
};
pub use config::{
    apply_override, AblationConfig, ConfigError, EvalConfig, ProbeConfig, RunConfig, Stages,
    ABLATION_SEED_START, HELD_OUT_SEED_START,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MOTBRIDGE_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "motbridge", version, about = "Train, evaluate and probe the two-expert toy model")]
pub struct Cli {
    /// JSON run configuration merged over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Restrict the run to a single seed (also the sampling seed of `generate`).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, value_name = "DIR", env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set stages.stage1.steps=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the evaluation, ablation and probe suites to datasets/.
    GenData,
    /// Run the three-phase curriculum for every seed.
    Train,
    /// Generate one sample of a suite file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suite file (NDJSON).
        #[arg(long)]
        sample: PathBuf,
        /// Line of the suite file, counting from 0.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Score a checkpoint on a suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Compare the post-Stage-I training schedules over the tau grid.
    Ablate,
    /// Emit layer-wise relevance maps.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn require_file(path: &std::path::Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

/// Resolves the configuration and runs the command, returning its
/// machine-readable summary.
pub fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let out = Outputs::new(root);
    let v = match &cli.command {
        Command::GenData => serde_json::to_value(cmd_gen_data(&cfg, &out)?),
        Command::Train => serde_json::to_value(cmd_train(&cfg, &out)?),
        Command::Generate {
            checkpoint,
            sample,
            index,
        } => {
            require_file(checkpoint)?;
            require_file(sample)?;
            serde_json::to_value(cmd_generate(&cfg, checkpoint, sample, *index, &out)?)
        }
        Command::Eval { checkpoint, suite } => {
            require_file(checkpoint)?;
            if let Some(s) = suite {
                require_file(s)?;
            }
            let mut r = serde_json::to_value(cmd_eval(&cfg, checkpoint, suite.as_deref(), &out)?);
            if let Ok(serde_json::Value::Object(m)) = &mut r {
                m.remove("rounds");
                m.remove("config");
            }
            r
        }
        Command::Ablate => {
            let s = cmd_ablate(&cfg, &out)?;
            serde_json::to_value(serde_json::json!({
                "rows": s.rows,
                "tau_monotonicity_violations": s.tau_sweep.violations().len(),
            }))
        }
        Command::Probe { checkpoint, suite } => {
            require_file(checkpoint)?;
            if let Some(s) = suite {
                require_file(s)?;
            }
            let idx = cmd_probe(&cfg, checkpoint, suite.as_deref(), &out)?;
            serde_json::to_value(serde_json::json!({
                "maps": idx.entries.len(),
                "separation": idx.separation,
                "groups": idx.groups,
            }))
        }
    };
    Ok(v.map_err(crate::Error::from)?)
}

/// Parses `args`, runs, prints the summary on stdout and diagnostics on
/// stderr, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(v) => {
            use std::io::Write;
            let text = serde_json::to_string_pretty(&v).unwrap_or_default();
            let _ = writeln!(std::io::stdout(), "{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
