//! `desca` command-line front end.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error. Diagnostics
//! go to stderr as one-line JSON objects.

mod cli;
mod commands;
mod config;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};
use commands::AppError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": e.to_string().trim_end() })
                );
                std::process::exit(1);
            }
        },
    };

    let result: Result<(), AppError> = match &cli.command {
        Command::Compute(args) => commands::compute(args),
        Command::Stereo(args) => commands::stereo(args),
        Command::Profile(args) => commands::profile(args),
        Command::Bench(args) => commands::bench(args),
    };

    if let Err(e) = result {
        eprintln!("{}", serde_json::json!({ "error": e.message() }));
        std::process::exit(e.code());
    }
}
