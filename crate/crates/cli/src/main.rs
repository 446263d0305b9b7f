mod cli;
mod commands;
mod dataset;
mod settings;

use std::process::ExitCode;

use clap::Parser;

/// Command failure, split by exit code: 1 for bad input, 2 for runtime.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
}

pub type Outcome<T> = std::result::Result<T, Failure>;

impl From<eegfm::Error> for Failure {
    fn from(e: eegfm::Error) -> Self {
        use eegfm::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. }
            | E::CorruptHeader { .. }
            | E::UnknownVersion { .. }
            | E::LengthMismatch { .. }
            | E::Json(_)
            | E::EmptyClass(_)
            | E::TooShort { .. } => Failure::Runtime(msg),
            _ => Failure::Validation(msg),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match cli::Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}\n\nrun `eegfm --help` for usage"),
                Failure::Validation(m) | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
