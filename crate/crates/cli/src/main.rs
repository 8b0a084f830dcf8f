//! `mizero`: zero-shot whole-slide classification from precomputed patch
//! embeddings.
//!
//! Data goes to files only; progress and the run banner go to standard
//! error. Failures print one line, `error kind=<Kind> msg=<text>`, and exit
//! with 2 (argument), 3 (input format) or 4 (numerical).

mod args;
mod bench;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use mizero_core::{Error, ErrorClass};

use crate::args::Cli;

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Argument => 2,
        ErrorClass::Input => 3,
        ErrorClass::Numerical => 4,
    }
}

fn report_error(kind: &str, msg: &str) {
    let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} msg={msg}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report_error("InvalidArgument", first);
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            report_error("InvalidArgument", "--threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            report_error("InvalidArgument", &e.to_string());
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(exit_code(e.class()))
        }
    }
}

pub(crate) type Result<T> = std::result::Result<T, Error>;
