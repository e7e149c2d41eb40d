mod args;
mod commands;
mod error;
mod io;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, RunConfig};
use crate::error::{CliError, Result};

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("GLUCOLOOP_LOG")
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> Result<()> {
    // `embedded` is what the outputs record; `command` is what actually runs.
    let (embedded, command) = match (&cli.config, cli.command) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--config replays a recorded run and takes no subcommand".into()))
        }
        (None, None) => return Err(CliError::Usage("no subcommand given; see --help".into())),
        (None, Some(command)) => {
            let config = RunConfig {
                seed: cli.seed,
                jobs: cli.jobs,
                command: command.clone(),
            };
            (config, command)
        }
        (Some(path), None) => {
            let config = io::read_config(path)?;
            let mut command = config.command.clone();
            if let Some(out) = cli.replay_out {
                command.redirect(out);
            }
            log::info!("replaying `{}` from {}", command.name(), path.display());
            (config, command)
        }
    };
    if let Some(jobs) = embedded.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    commands::execute(&command, &embedded)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli);
    match std::panic::catch_unwind(move || run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            log::error!("internal error (panic); please report it");
            ExitCode::from(2)
        }
    }
}
