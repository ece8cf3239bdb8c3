//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input, 2 optimization divergence,
//! 3 I/O failure. `TSRQ_THREADS` caps the worker thread count.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use lowbit::Error;

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Divergence(_) | Error::Training(_) => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("TSRQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Argument(format!("TSRQ_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(format!("thread pool: {e}")))
}

fn run(cmd: &Command) -> Result<(), Error> {
    match cmd {
        Command::TrainToy(a) => commands::train_toy_cmd(a, cmd),
        Command::Quantize(a) => commands::quantize_cmd(a, cmd),
        Command::EvalPpl(a) => commands::eval_cmd(a),
        Command::InspectFlips(a) => commands::flips_cmd(a),
        Command::AblateSchedule(a) => commands::ablate_cmd(a),
        Command::Replay(a) => {
            let recorded = commands::recorded_command(&a.artifact)?;
            if matches!(recorded, Command::Replay(_)) {
                return Err(Error::Data("recorded command is itself a replay".into()));
            }
            run(&recorded)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|_| run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
