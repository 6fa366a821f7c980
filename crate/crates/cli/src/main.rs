mod bench;
mod config;
mod kl;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nora::driver::Strategy;

#[derive(Parser)]
#[command(
    name = "nora",
    version,
    about = "Active-learning Bayesian inference with nested-sampling acquisition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the active-learning loop on one target.
    Run(RunArgs),
    /// Run every (config, seed) pair of a benchmark spec and summarize.
    Bench(BenchArgs),
    /// Symmetric KL divergence between a chain and another chain or a builtin target.
    Kl(KlArgs),
    /// Target utilities.
    Targets {
        #[command(subcommand)]
        command: TargetsCommand,
    },
}

#[derive(Subcommand)]
enum TargetsCommand {
    /// List the builtin targets.
    List,
}

#[derive(Args)]
pub struct RunArgs {
    /// JSON run configuration (schema "nora-run/1").
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin target, e.g. ring or gaussian_random:4:1.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, env = "NORA_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "nora-out")]
    out: PathBuf,
    /// Also write every iteration's NS sample to OUT/deadpoints/.
    #[arg(long)]
    dump_deadpoints: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    /// JSON benchmark spec (schema "nora-bench/1").
    #[arg(long)]
    config: PathBuf,
    /// Overrides the spec's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the worker count of every run.
    #[arg(long, env = "NORA_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args)]
pub struct KlArgs {
    /// Chain file (rows: weight log_target x_1 … x_d).
    chain: PathBuf,
    /// Second chain file, or a builtin target name.
    other: String,
    /// Surrogate snapshot for the first chain [default: surrogate.json beside it].
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Surrogate snapshot for the second chain [default: surrogate.json beside it].
    #[arg(long)]
    other_surrogate: Option<PathBuf>,
    /// Size of the exact truth sample for Gaussian targets.
    #[arg(long, default_value_t = 10_000)]
    truth_size: usize,
    #[arg(long, env = "NORA_WORKERS", default_value_t = 1)]
    workers: usize,
}

/// Failures mapped to exit codes: 2 for bad input, 1 for runtime errors.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => output::cmd_run(&args),
        Command::Bench(args) => bench::cmd_bench(&args),
        Command::Kl(args) => kl::cmd_kl(&args),
        Command::Targets {
            command: TargetsCommand::List,
        } => {
            for (name, about) in nora::targets::builtin_catalog() {
                println!("{name:<26} {about}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nora: {e}");
            ExitCode::from(e.code())
        }
    }
}
