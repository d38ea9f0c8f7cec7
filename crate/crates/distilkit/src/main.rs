use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    // clap prints usage and exits with 2 on unknown flags/subcommands
    let cli = distilkit::cli::Cli::parse();
    match distilkit::cli::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e);
            ExitCode::from(1)
        }
    }
}
