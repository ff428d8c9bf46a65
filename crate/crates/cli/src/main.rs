//! `coreinfer` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error,
//! 3 model bundle error, 4 similarity strategy without a group store.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use coreinfer::Error;

use args::{Cli, Command};
use manifest::RunManifest;

pub struct Failure {
    pub code: i32,
    pub err: anyhow::Error,
}

impl Failure {
    pub fn config(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: err.into() }
    }

    pub fn model(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, err: err.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingStore => 4,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Checksum { .. }
            | Error::Malformed { .. }
            | Error::TensorShape { .. }
            | Error::MissingTensor(_)
            | Error::UnexpectedTensor(_)
            | Error::UnsupportedDtype { .. } => 3,
            Error::InvalidArgument(_)
            | Error::InvalidConfig(_)
            | Error::PromptTooLong { .. }
            | Error::EmptyPrompt
            | Error::UnknownToken { .. }
            | Error::InvalidPlan(_)
            | Error::LayerMismatch(_)
            | Error::Json { .. }
            | Error::Io { .. } => 2,
            _ => 1,
        };
        Self { code, err: e.into() }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    let mut command = match command {
        Command::Replay(r) => {
            let recorded = RunManifest::read(&r.manifest)?;
            let mut cmd = recorded.command;
            if let Command::Replay(_) = cmd {
                return Err(Failure::config(anyhow::anyhow!("manifest records a replay")));
            }
            if let Some(out) = r.out {
                *cmd.out_mut().expect("non-replay commands have an output") = out;
            }
            log::info!("replaying {} from {}", cmd.name(), r.manifest.display());
            cmd
        }
        other => other,
    };
    let out = command.out_mut().expect("non-replay commands have an output").clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::config(anyhow::anyhow!("creating {}: {e}", out.display())))?;

    let mut manifest = RunManifest::begin(&command);
    manifest.write(&out)?;
    let result = match &command {
        Command::Run(a) => commands::run(a, &mut manifest),
        Command::Analyze(a) => commands::analyze(a, &mut manifest),
        Command::Cluster(a) => commands::cluster(a, &mut manifest),
        Command::Eval(a) => commands::eval(a, &mut manifest),
        Command::Bench(a) => commands::bench(a, &mut manifest),
        Command::Synth(a) => commands::synth(a, &mut manifest),
        Command::Replay(_) => unreachable!("replay resolved above"),
    };
    manifest.finish(&result);
    manifest.write(&out)?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        coreinfer::tensor::set_max_threads(t);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code as u8)
        }
    }
}
