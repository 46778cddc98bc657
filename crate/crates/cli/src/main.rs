//! `batchrl` — one binary exposing the offline RL pipeline stages as
//! subcommands: log generation, timeline join, normalization fitting, data
//! understanding, training, counterfactual evaluation, batch scoring, and a
//! single-command end-to-end run on a bundled environment.
//!
//! Exit codes: 0 success, 1 usage error, 2 data validation error,
//! 3 numerical abort.

mod commands;

use clap::error::ErrorKind;
use clap::Parser;

use commands::{dispatch, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is usage
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}
