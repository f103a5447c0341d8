//! `smaformer COMMAND [--config=PATH] [--out=DIR] [--seed=N] [--overwrite] [--key=value ...]`
//!
//! Commands: `synth`, `gradcheck`, `train`, `eval`, `predict`.
//! Exit codes: 0 ok, 1 verification failure, 2 usage or I/O error,
//! 3 numerical failure.

mod commands;
mod config;

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] smaformer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("SMAFORMER_THREADS").ok().and_then(|v| v.parse().ok()) {
        // the global pool can only be built once; a second attempt is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = config::parse_args(std::env::args().skip(1)).and_then(|inv| commands::run(&inv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
