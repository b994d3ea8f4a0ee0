use std::process::ExitCode;

use clap::Parser;
use defectscan_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("defectscan: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
