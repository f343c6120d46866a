//! Command-line driver: configuration loading, subcommands and the
//! machine-readable error record.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "condbeta",
    version,
    about = "Realized and conditional asymmetric betas"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Abort on the first failed forecasting cell.
    #[arg(long, global = true)]
    pub fail_fast: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic panels.
    Synth,
    /// Compute realized betas.
    Betas,
    /// Run the rolling-window forecasting experiment.
    Forecast,
    /// Out-of-sample R², Clark-West, CDFE, quintile and importance tables.
    Evaluate,
    /// DCF valuation tables.
    Value,
    /// Market-neutral minimum-variance portfolios.
    Portfolio,
    /// Consolidated summary.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Betas => "betas",
            Command::Forecast => "forecast",
            Command::Evaluate => "evaluate",
            Command::Value => "value",
            Command::Portfolio => "portfolio",
            Command::Report => "report",
        }
    }
}

/// An upstream artifact a command depends on does not exist.
#[derive(Debug)]
pub struct MissingArtifact {
    pub path: PathBuf,
    /// Command (or input) that produces it.
    pub producer: &'static str,
}

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing upstream artifact {} (produced by {})",
            self.path.display(),
            self.producer
        )
    }
}

impl std::error::Error for MissingArtifact {}

pub fn run(command: Command, cfg: &RunConfig, fail_fast: bool) -> anyhow::Result<()> {
    match command {
        Command::Synth => commands::cmd_synth(cfg),
        Command::Betas => commands::cmd_betas(cfg),
        Command::Forecast => commands::cmd_forecast(cfg, fail_fast),
        Command::Evaluate => commands::cmd_evaluate(cfg),
        Command::Value => commands::cmd_value(cfg),
        Command::Portfolio => commands::cmd_portfolio(cfg),
        Command::Report => commands::cmd_report(cfg),
    }
}

/// One-line JSON error record.
pub fn error_record(command: Command, err: &anyhow::Error) -> String {
    let missing = err
        .chain()
        .find_map(|e| e.downcast_ref::<MissingArtifact>())
        .map(|m| m.path.display().to_string());
    let causes: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    json!({
        "status": "error",
        "command": command.name(),
        "message": err.to_string(),
        "causes": causes,
        "missing_artifact": missing,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_record_is_single_line_json() {
        let err = anyhow::Error::new(MissingArtifact {
            path: PathBuf::from("out/betas.csv"),
            producer: "betas",
        })
        .context("loading inputs");
        let line = error_record(Command::Forecast, &err);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["command"], "forecast");
        assert_eq!(v["missing_artifact"], "out/betas.csv");
        assert_eq!(v["causes"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn parses_global_flags() {
        let cli = Cli::try_parse_from([
            "condbeta",
            "forecast",
            "--config",
            "x.toml",
            "--threads",
            "2",
            "--fail-fast",
        ])
        .unwrap();
        assert_eq!(cli.command, Command::Forecast);
        assert_eq!(cli.threads, Some(2));
        assert!(cli.fail_fast);
        assert!(Cli::try_parse_from(["condbeta", "bogus"]).is_err());
    }
}
