use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparkle_cli::runner::{cmd_run, cmd_sweep, cmd_verify, thread_count, CheckStatus};
use sparkle_cli::{CliError, ExperimentConfig};

/// Decentralized stochastic bilevel optimization simulator.
#[derive(Parser)]
#[command(name = "sparkle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment, one CSV per replicate.
    Run(Common),
    /// Run once per value of one parameter and summarize.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary, e.g. n, strategy, topology, rho, theta.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Check matrices, engine equivalence, hypergradients and the single-level reduction.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to SPARKLE_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Option<usize>), CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.output = out.clone();
        }
        Ok((cfg, thread_count(self.threads)?))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Run(common) => {
            let (cfg, threads) = common.load()?;
            let report = cmd_run(cfg, threads)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, threads) = common.load()?;
            let report = cmd_sweep(cfg, &axis, &values, threads)?;
            for e in &report.entries {
                println!("{axis}={} r{}: {}", e.value, e.replicate, e.status);
            }
            println!("{}", report.summary.display());
            Ok(report.exit_code())
        }
        Command::Verify(common) => {
            let (cfg, _) = common.load()?;
            let checks = cmd_verify(cfg)?;
            for c in &checks {
                println!("{c}");
            }
            let failed: Vec<String> = checks
                .iter()
                .filter(|c| c.status == CheckStatus::Fail)
                .map(|c| c.name.to_string())
                .collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                Err(CliError::Verify(failed))
            }
        }
    }
}
