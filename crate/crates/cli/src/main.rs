use std::process::ExitCode;

use clap::Parser;
use rainunet_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
