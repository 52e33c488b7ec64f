//! `preflab` — reproducible experiments for the tabular preference
//! alignment laboratory.
//!
//! Subcommands: `gen` (worlds and datasets), `train` (policy optimization),
//! `certify` (the numerical certificate suite) and `frontier` (KL-reward
//! trade-off sweeps). All state lives in plain files; reruns with identical
//! configs produce byte-identical outputs.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 certificate
//! failure.

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::Parser;
use preflab_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "preflab",
    version,
    about = "Tabular preference-alignment laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Generate a synthetic world and preference dataset.
    Gen(commands::GenArgs),
    /// Train a policy against a configured loss.
    Train(commands::TrainArgs),
    /// Run the numerical certificate suite.
    Certify(commands::CertifyArgs),
    /// Sweep beta and record the exact KL-reward frontier.
    Frontier(commands::FrontierArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };

    let result = match cli.command {
        Command::Gen(args) => commands::cmd_gen(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Certify(args) => commands::cmd_certify(args),
        Command::Frontier(args) => commands::cmd_frontier(args),
    };

    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 1,
        _ => 2,
    }
}
