use std::fs;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;

mod ablate;
mod args;
mod bench;
mod common;
mod generate;
mod manifest;

use args::{Cli, Command};
use common::{usage, CliError, CliResult};
use manifest::RunManifest;

fn init_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else {
        return Ok(());
    };
    if n == 0 {
        return usage("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate(a) => generate::run(&a),
        Command::Bench(a) => bench::run(&a),
        Command::Ablate(a) => ablate::run(&a),
        Command::Replay(r) => {
            let text = fs::read_to_string(&r.manifest)
                .with_context(|| format!("reading manifest {}", r.manifest.display()))?;
            let manifest = RunManifest::parse(&text)?;
            let argv = manifest.replay_argv(r.out_dir.as_deref())?;
            let cli = Cli::try_parse_from(&argv).map_err(|e| {
                CliError::Usage(format!("manifest does not describe a valid run: {e}"))
            })?;
            if matches!(cli.command, Command::Replay(_)) {
                return usage("a manifest cannot replay another replay");
            }
            dispatch(cli.command)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads(cli.threads).and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sparsed: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
