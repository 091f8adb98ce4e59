use std::process::ExitCode;

use clap::Parser;

mod cli;
mod commands;
mod config;

use cli::{Cli, Command};
use config::ConfigFile;

/// CLI-level error carrying a human message; printed as a
/// machine-parsable JSON record on stderr.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }

    pub fn from_display(e: impl std::fmt::Display) -> Self {
        Self(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg: ConfigFile = match &cli.config {
        Some(path) => config::load_config(path).map_err(CliError::new)?,
        None => ConfigFile::default(),
    };
    // Flags win over the config file, which wins over defaults.
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let threads = cli.threads.or(cfg.threads).unwrap_or(1);

    match &cli.command {
        Command::GenSynthetic(args) => commands::run_gen_synthetic(args, seed),
        Command::Diagnose(args) => commands::run_diagnose(args),
        Command::Probe(args) => commands::run_probe(args, threads),
        Command::ProjectTest(args) => commands::run_project_test(args),
        Command::BuildDb(args) => commands::run_build_db(args),
        Command::Retrieve(args) => commands::run_retrieve(args, &cfg),
        Command::EvalRetrieval(args) => commands::run_eval_retrieval(args, &cfg, threads),
        Command::Decode(args) => commands::run_decode(args, &cfg, seed),
        Command::PrepTrain(args) => commands::run_prep_train(args, &cfg, seed, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
