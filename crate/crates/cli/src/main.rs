use std::process::ExitCode;

use clap::Parser;
use tracklink_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("tracklink: {msg}");
            ExitCode::FAILURE
        }
    }
}
