use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use lane::harness::{run_from_path, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Prepare,
    ExtractPrefs,
    Train,
    Evaluate,
    Explain,
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Prepare => Command::Prepare,
            Cmd::ExtractPrefs => Command::ExtractPrefs,
            Cmd::Train => Command::Train,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Explain => Command::Explain,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

/// Explainable sequential recommendation pipeline.
#[derive(Debug, Parser)]
#[command(name = "lane", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `preferences.m=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run_from_path(args.command.into(), &args.config, &args.set, args.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
