use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lazydyn_cli::config::{load_config, ConfigError};
use lazydyn_cli::{report, runner};

#[derive(Parser)]
#[command(name = "lazydyn", version, about = "Run and summarise training-dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment configuration.
    Run {
        config: PathBuf,
        /// Dotted-path overrides such as `train.eta=0.5`.
        overrides: Vec<String>,
        /// Run this seed only, replacing the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse and check a configuration without running it.
    Validate { config: PathBuf, overrides: Vec<String> },
    /// Summarise every run below a directory.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            overrides,
            seed,
            jobs,
            out,
        } => load_config(&config, &overrides).and_then(|cfg| {
            let summary = runner::run(&cfg, &runner::RunOptions { out, jobs, seed })?;
            println!("{}", summary.dir.display());
            Ok(())
        }),
        Command::Validate { config, overrides } => load_config(&config, &overrides).map(|cfg| {
            println!("ok: {} ({} seeds)", cfg.experiment, cfg.seeds.len());
        }),
        Command::Report { dir } => {
            print!("{}", report::report(&dir));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
