use std::process::ExitCode;

use clap::Parser;

mod commands;
mod settings;

use commands::{Cli, CheckFailed};

/// Process exit status for an error, by category.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<guidenet::Error>() {
        Some(guidenet::Error::Contract(_)) => 1,
        Some(guidenet::Error::Config(_) | guidenet::Error::Io { .. }) => 2,
        Some(guidenet::Error::Numeric(_)) => 3,
        Some(
            guidenet::Error::Format(_)
            | guidenet::Error::Parse { .. }
            | guidenet::Error::Referential { .. }
            | guidenet::Error::Dimension(_),
        ) => 4,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
