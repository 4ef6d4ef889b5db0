//! `cmota` command-line interface.
//!
//! Every command works inside one run directory (`--out`). Flags take
//! precedence over `CMOTA_*` environment variables, which take precedence
//! over the config file and preset.
//!
//! Exit codes: 0 ok, 1 usage or config error, 2 missing artifact,
//! 3 numerical failure.

mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cmota", version, about = "Story visualization with context memory on a synthetic story world")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run config; replaces the preset.
    #[arg(long, global = true, env = "CMOTA_CONFIG", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config preset.
    #[arg(long, global = true, env = "CMOTA_PRESET", value_parser = ["desk", "paper"])]
    pub preset: Option<String>,
    /// Run seed; overrides the config.
    #[arg(long, global = true, env = "CMOTA_SEED")]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = "CMOTA_OUT", default_value = "runs/default")]
    pub out: PathBuf,
    /// Ablation arm (tr, pma, pma_awm, pma_awm_bi, full, all_level, offline).
    /// Repeatable for `ablate`.
    #[arg(long, global = true, env = "CMOTA_ARM", value_delimiter = ',')]
    pub arm: Vec<String>,
    /// Proceed despite a config-hash mismatch with existing artifacts.
    #[arg(long, global = true, env = "CMOTA_FORCE")]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the story-world dataset into `OUT/data`.
    GenData,
    /// Fit the patch codebook on the training images.
    FitCodebook,
    /// Train (or resume) and write checkpoints plus a metrics log.
    Train {
        /// Stop after this many optimizer steps in this invocation.
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint of the captioner for the offline arm.
        #[arg(long)]
        captioner: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint to evaluate (default: the latest in `OUT`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate frames (and pseudo-texts) for a story.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One caption per frame; repeat for a story. Defaults to a test story.
        #[arg(long = "text")]
        texts: Vec<String>,
        /// Test story used when no `--text` is given.
        #[arg(long, default_value_t = 0)]
        story: usize,
    },
    /// Dump memory attention weights for a test story.
    InspectMemory {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        story: usize,
    },
    /// Train and evaluate ablation arms over shared seeds.
    Ablate {
        /// Run seeds 0..N.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Missing(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Missing(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Missing(m) | Failure::Numerical(m) => m,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cli.global),
        Command::FitCodebook => commands::fit_codebook(&cli.global),
        Command::Train { steps, captioner } => commands::train(&cli.global, steps, captioner.as_deref()),
        Command::Eval { checkpoint } => commands::eval(&cli.global, checkpoint.as_deref()),
        Command::Sample { checkpoint, texts, story } => commands::sample(&cli.global, checkpoint.as_deref(), &texts, story),
        Command::InspectMemory { checkpoint, story } => commands::inspect_memory(&cli.global, checkpoint.as_deref(), story),
        Command::Ablate { seeds } => commands::ablate(&cli.global, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
