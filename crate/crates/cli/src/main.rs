use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = fedmix_cli::Cli::parse();
    match fedmix_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", fedmix_cli::error_json(&e));
            ExitCode::FAILURE
        }
    }
}
