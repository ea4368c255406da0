//! `bcqforge` experiment driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use bcqforge_core::experiment::pipeline::{self, Context};
use bcqforge_core::experiment::ExperimentConfig;
use bcqforge_core::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bcqforge", version, about = "Batch-constrained Q-learning experiments on clinical cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set bcq.tau=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Number of seeded training runs.
    #[arg(long, default_value_t = 1, global = true)]
    seeds: usize,

    /// Output directory for all artifacts.
    #[arg(long, default_value = "runs/default", global = true)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a cohort with oracle labels.
    Generate,
    /// Bin, impute, split and normalize the raw cohort.
    Preprocess,
    /// Pretrain the encoder, fit G and μ, train BCQ with periodic evaluation.
    Train,
    /// Train scratch and transferred learners on the target task.
    Transfer,
    /// Re-evaluate the trained policy on the test split.
    Evaluate,
    /// Outcome simulation under the trained policy.
    Simulate,
    /// Logistic-regression and MLP classification baselines.
    Baselines,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    base.with_overrides(&cli.overrides)?.with_seed_from_env()
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let ctx = Context::new(load_config(cli)?, &cli.out)?;
    log::info!("config hash {}", ctx.hash);
    match cli.command {
        Command::Generate => print_json(&pipeline::generate(&ctx)?),
        Command::Preprocess => {
            let cohort = pipeline::preprocess(&ctx)?;
            println!("preprocessed {} trajectories into {}", cohort.trajectories.len(), ctx.out.display());
            Ok(())
        }
        Command::Train => {
            let (_, summary) = pipeline::train(&ctx, cli.seeds)?;
            print_json(&summary)
        }
        Command::Transfer => {
            let report = pipeline::transfer(&ctx)?;
            println!("{}", report.summary);
            print_json(&report)
        }
        Command::Evaluate => print_json(&pipeline::evaluate(&ctx)?),
        Command::Simulate => {
            let s = pipeline::simulate(&ctx)?;
            println!("mortality: {}", s.mortality.summary);
            println!("worsening acuity: {}", s.acuity.summary);
            Ok(())
        }
        Command::Baselines => print_json(&pipeline::baselines(&ctx)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
