mod cli;
mod commands;
mod error;
mod files;
mod output;
mod plots;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::Cli;
use crate::error::{CliError, EXIT_CONVERGENCE};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::run(&cli.command).and_then(|arts| match arts {
        Some(arts) => {
            let dir = arts.dir().to_path_buf();
            let manifest = arts.finish()?;
            eprintln!("wrote {} artifacts to {}", manifest.artifacts.len() + 1, dir.display());
            Ok(manifest.warnings)
        }
        None => Ok(Vec::new()),
    });
    match result {
        Ok(warnings) if cli.strict && !warnings.is_empty() => {
            let e = CliError::convergence(warnings.join("; "));
            eprintln!("{}", e.to_json());
            ExitCode::from(EXIT_CONVERGENCE as u8)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
