//! `tcp`: task generation, training, evaluation, sweeps and self-checks.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage, 3 config, 4 numeric
//! divergence, 5 I/O, 6 file format or compatibility, 7 a check failed.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tcp_core::config::RunConfig;
use tcp_core::error::Error;
use tcp_core::eval::SweepAxis;
use tcp_core::selftest::gradcheck_config;

use commands::Output;
use manifest::Overrides;

#[derive(Parser, Debug)]
#[command(name = "tcp", version, about = "Class-aware prompt tuning on synthetic few-shot tasks")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "TCP_OUT_DIR", default_value = "tcp-out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the task and write its three splits.
    GenTask,
    /// Train one run with the configured seeds.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write the checkpoint after every epoch.
        #[arg(long)]
        checkpoint_every_epoch: bool,
    },
    /// Train and evaluate over the evaluation seeds, or evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Ablation sweep along one axis.
    Sweep {
        /// insert_layer, prompt_length, d_mid, fusion_lambda, template, layer_sets or mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis default list when absent.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference gradient check (tiny config unless overridden).
    Gradcheck,
    /// Run the quick invariant suite.
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Vocabulary { .. } => 3,
        Error::Divergence { .. } | Error::NonFinite { .. } => 4,
        Error::Io { .. } => 5,
        Error::Version { .. }
        | Error::Truncated(_)
        | Error::NonUnit { .. }
        | Error::Format(_)
        | Error::Mismatch(_) => 6,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<commands::Outcome, Error> {
    if let Command::Selftest = cli.command {
        return commands::selftest_cmd();
    }
    let base = match cli.command {
        Command::Gradcheck => gradcheck_config(),
        _ => RunConfig::default(),
    };
    let config = cli.overrides.resolve(base)?;
    let out = Output::new(cli.out)?;
    match cli.command {
        Command::GenTask => commands::gen_task(&config, &out),
        Command::Train {
            resume,
            checkpoint_every_epoch,
        } => commands::train(&config, &out, resume.as_deref(), checkpoint_every_epoch),
        Command::Eval { checkpoint, jobs } => commands::eval(&config, &out, checkpoint.as_deref(), jobs),
        Command::Sweep { axis, values, jobs } => commands::sweep(&config, &out, axis.parse::<SweepAxis>()?, values, jobs),
        Command::Gradcheck => commands::gradcheck_cmd(&config, &out),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(commands::CheckFailed)) => ExitCode::from(7),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
