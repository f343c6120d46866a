use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use condbeta_cli::{error_record, run, Cli, RunConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = (|| {
        #[cfg(feature = "parallel")]
        if let Some(n) = cli.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring worker threads")?;
        }
        #[cfg(not(feature = "parallel"))]
        if cli.threads.is_some() {
            log::warn!("--threads ignored: built without the parallel feature");
        }
        let path = cli.config.as_deref().context("--config PATH is required")?;
        let cfg = RunConfig::load(path)?;
        run(cli.command, &cfg, cli.fail_fast)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(cli.command, &e));
            ExitCode::FAILURE
        }
    }
}
