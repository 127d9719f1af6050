mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use config::ToolConfig;

/// Keyed branch-inversion obfuscation for RV32I assembly.
///
/// Defaults for most flags can be set in a `key = value` file named by
/// the DRNDALO_CONFIG environment variable.
#[derive(Parser, Debug)]
#[command(name = "drndalo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct KeyArgs {
    /// 64-bit key as 16 hex digits.
    #[arg(long)]
    pub key: Option<String>,
    /// Inversion hash.
    #[arg(long, value_parser = ["lfsr", "mix64"])]
    pub scheme: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SimArgs {
    #[arg(long)]
    pub hash_cycles: Option<u32>,
    #[arg(long)]
    pub cache_lines: Option<usize>,
    #[arg(long)]
    pub branch_penalty: Option<u32>,
    /// Cycles of hash latency hidden between decode and execute.
    #[arg(long)]
    pub overlap: Option<u32>,
    #[arg(long)]
    pub max_cycles: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Invert conditional branches under a key.
    Obfuscate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output assembly; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        key: KeyArgs,
        /// Also write the inversion mask.
        #[arg(long)]
        emit_mask: Option<PathBuf>,
    },
    /// Undo `obfuscate`, from the key or from a mask file.
    Deobfuscate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        key: KeyArgs,
        /// Use this mask instead of the key.
        #[arg(long)]
        mask_file: Option<PathBuf>,
    },
    /// Run a program on one of the pipeline designs.
    Sim {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = ["baseline", "stall", "cache", "mask"])]
        design: Option<String>,
        #[command(flatten)]
        key: KeyArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Inversion bits for the mask design; derived from the key if absent.
        #[arg(long)]
        mask_file: Option<PathBuf>,
        /// Word stored at the program's `input` label before running.
        #[arg(long = "input")]
        input_word: Option<u32>,
        /// JSON report path; stdout if omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate the cost of deobfuscating a plain program in software.
    SoftDeobf {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = ["jit-cached", "jit-uncached", "runtime"])]
        mode: String,
        /// Mask for the runtime rewrite is derived from this key; all zero if
        /// neither a key nor a mask file is given.
        #[command(flatten)]
        key: KeyArgs,
        #[arg(long)]
        mask_file: Option<PathBuf>,
        #[arg(long)]
        per_branch_cost: Option<u64>,
        #[arg(long)]
        mask_lookup_cost: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a classifier to spot inverted branches.
    Stealth {
        /// Directory of `.s` programs; the bundled corpus if omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Use this many generated programs instead of a corpus directory.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Generated programs favour `blt` over `bge`.
        #[arg(long, requires = "synthetic")]
        skewed: bool,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        key: KeyArgs,
        /// Window sizes, comma separated and ascending.
        #[arg(long)]
        window: Option<String>,
        #[arg(long, value_parser = ["logreg", "tree"])]
        model: Option<String>,
        #[arg(long)]
        split_seed: Option<u64>,
        /// Replace labels with a fair coin drawn from this seed.
        #[arg(long)]
        noise_labels: Option<u64>,
        /// Write the samples of the largest window here.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Guess inversion masks and measure divergence without the key.
    Attack {
        #[arg(long)]
        obf: PathBuf,
        #[arg(long)]
        plain: PathBuf,
        #[arg(long, conflicts_with = "trials")]
        exhaustive: bool,
        #[arg(long)]
        trials: Option<u64>,
        /// Random input words for the divergence measurement.
        #[arg(long, default_value_t = 100)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_cycles: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every corpus program on all four designs; CSV to stdout or --out.
    Bench {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        key: KeyArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled or a generated corpus to a directory.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, requires = "synthetic")]
        skewed: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Obfuscate { .. } => "obfuscate",
            Command::Deobfuscate { .. } => "deobfuscate",
            Command::Sim { .. } => "sim",
            Command::SoftDeobf { .. } => "soft-deobf",
            Command::Stealth { .. } => "stealth",
            Command::Attack { .. } => "attack",
            Command::Bench { .. } => "bench",
            Command::Corpus { .. } => "corpus",
        }
    }
}

fn usage_exit(subcommand: &str, msg: &str) -> ExitCode {
    let mut cmd = Cli::command();
    cmd.build();
    let usage = cmd
        .find_subcommand_mut(subcommand)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try '--help'.");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let cfg = match ToolConfig::from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<commands::UsageError>() {
            Some(u) => usage_exit(name, &u.0),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
