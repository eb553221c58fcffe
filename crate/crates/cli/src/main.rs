mod args;
mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use config::Settings;
use error::{CliError, CliResult};

fn run(cli: Cli) -> CliResult<()> {
    let mut settings = Settings::load(cli.global.config.as_deref())?;
    let seed = settings.value("seed", cli.global.seed, 0u64)?;
    let out = settings.value("out", cli.global.out, PathBuf::from("out"))?;
    let threads = settings.value("threads", cli.global.threads, 1usize)?;
    if threads == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let ctx = Context {
        settings,
        seed,
        out,
    };
    match cli.command {
        Command::GenData(f) => commands::gen_data(ctx, f),
        Command::Train(f) => commands::train(ctx, f),
        Command::Attack(f) => commands::attack(ctx, f),
        Command::Eval(f) => commands::eval(ctx, f),
        Command::Embed(f) => commands::embed(ctx, f),
        Command::Report(f) => commands::report(ctx, f),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
