//! `postlink`: optimize, compare, generate and inspect program layouts.

mod args;
mod commands;

use std::fmt::Display;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::error::ErrorKind;
use clap::Parser;

use args::{normalize, Cli, Command};

/// Tags an error with the pipeline stage it came from.
pub(crate) fn stage<T, E: Display>(stage: &str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| anyhow!("{stage}: {e}"))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Optimize(a) => commands::optimize(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gen(a) => commands::gen(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::Stats(a) => commands::stats(a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().enumerate().map(|(i, a)| if i == 0 { a } else { normalize(&a) }).collect();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: args: {}", commands::first_line(&e.to_string()).trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
