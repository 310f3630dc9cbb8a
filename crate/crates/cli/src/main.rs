//! `nvhf` command-line front end.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Exit status categories.
const EXIT_DATA: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;

fn exit_code(e: &nvhf::Error) -> u8 {
    match e {
        nvhf::Error::NotConverged(_) | nvhf::Error::Diagonalization => EXIT_CONVERGENCE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(out) => {
            println!("{}", out.report);
            for p in &out.files {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
