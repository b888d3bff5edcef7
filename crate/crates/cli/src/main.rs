//! `edrain`: train, run and evaluate the deraining network from the shell.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
//! `EDRAIN_THREADS` caps the worker pool size.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("EDRAIN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("EDRAIN_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Derain(a) => commands::derain(a),
        Command::Eval(a) => commands::eval(a),
        Command::RainmixPreview(a) => commands::rainmix_preview(a),
        Command::Bench(a) => commands::bench(a),
        Command::GenStreaks(a) => commands::gen_streaks(a),
        Command::GenPairs(a) => commands::gen_pairs(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
