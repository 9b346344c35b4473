//! `multidistill` command-line driver.

mod eval;
mod output;
mod run;
mod stats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Multi-teacher feature distillation, evaluation, and statistics.
#[derive(Parser, Debug)]
#[command(name = "multidistill", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a student against frozen teachers; writes a checkpoint and a JSON-lines log.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the distillation gradients (exit 1 on failure).
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score predictions against ground truth; prints a metric report.
    Eval {
        #[arg(long, value_enum)]
        task: eval::Task,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Compare models over a run table; prints the report, optionally writes it with a rank CSV.
    Stats {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic frame dataset.
    DataGen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status for runtime and input errors; 1 is reserved for a failed gradient check.
const EXIT_ERROR: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MULTIDISTILL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Distill { config, out } => run::cmd_distill(&config, &out),
        Command::GradCheck { config } => run::cmd_grad_check(&config),
        Command::Eval { task, pred, gt } => eval::cmd_eval(task, &pred, &gt),
        Command::Stats { table, config, out } => stats::cmd_stats(&table, &config, out.as_deref()),
        Command::DataGen { spec, out } => run::cmd_data_gen(&spec, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
