use std::process::ExitCode;

use clap::Parser;
use cotrain_cli::memcalc::{run, MemcalcArgs};
use cotrain_cli::{finish, EXIT_CONFIG};

/// Training memory calculator.
#[derive(Debug, Parser)]
#[command(name = "memcalc", version)]
struct Cli {
    #[command(flatten)]
    args: MemcalcArgs,
}

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => finish(run(&cli.args)),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
