use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use moesl_cli::{run, Cli, CliError, EXIT_VIOLATION};

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MOESL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!("MOESL_THREADS={raw:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main_inner(cli: &Cli) -> Result<Vec<String>, CliError> {
    configure_threads()?;
    let outcome = run(cli)?;
    let csv = outcome.table.to_csv();
    match &cli.out {
        Some(path) => std::fs::write(path, csv).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(csv.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| CliError::Io {
                    path: "<stdout>".into(),
                    source,
                })?
        }
    }
    Ok(outcome.violations)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(violations) if violations.is_empty() => ExitCode::SUCCESS,
        Ok(violations) => {
            for v in &violations {
                eprintln!("contract violation: {v}");
            }
            ExitCode::from(EXIT_VIOLATION as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
