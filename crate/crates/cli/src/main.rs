//! `orthode`: train, certify and attack Neural ODE classifiers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "orthode", version, about = "Orthogonal Neural ODE experiments")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured architecture, then evaluate and certify it.
    Train(Common),
    /// Lipschitz, Grönwall and contraction reports for a checkpoint.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy table under the configured attacks.
    AttackEval {
        #[command(flatten)]
        common: Common,
        /// Repeatable; defaults to the checkpoints written by `train`.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Fast property suite; exit code 3 if anything fails.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Train(c) => commands::train(&c.config, c.seed, c.out),
        Command::Certify { common: c, checkpoint } => commands::certify(&c.config, c.seed, c.out, &checkpoint),
        Command::AttackEval { common: c, checkpoint } => commands::attack_eval(&c.config, c.seed, c.out, &checkpoint),
        Command::Selftest { inject_fault } => commands::selftest(inject_fault.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
