use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use priorseg::cli::{self, Cli};

fn run(args: Cli) -> anyhow::Result<()> {
    let name = args.command.name();
    cli::run(args).with_context(|| format!("{name} failed"))
}

fn main() -> ExitCode {
    if cli::deterministic_requested() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
