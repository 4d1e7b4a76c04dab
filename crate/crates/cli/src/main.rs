use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match warpdetect::run(warpdetect::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(warpdetect::exit_code(&e))
        }
    }
}
