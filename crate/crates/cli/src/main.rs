use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match covsde_cli::run(covsde_cli::Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
