//! `osr`: data generation, training, inference and evaluation for the toy super-resolution
//! pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 state or data error, 3 numerical
//! failure during training.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Errors carry the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Core(#[from] osr_core::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use osr_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::State(_) | CliError::Csv(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Range { .. } | E::Vocabulary(_) => 1,
                E::Numerical { .. } => 3,
                _ => 2,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SweepTimestep(a) => commands::sweep_timestep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
