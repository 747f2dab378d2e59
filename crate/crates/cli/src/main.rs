use std::process::ExitCode;

use clap::Parser;
use mammoth_cli::args::{expand_config, Cli};
use mammoth_cli::{commands, UsageError};

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::from(RUNTIME)
            }
        }
    }
}
