use std::process::ExitCode;

use clap::Parser;
use deepj_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(manifest) => {
            eprintln!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
