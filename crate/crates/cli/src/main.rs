//! `aec`: batch front end for the full-band echo canceller.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 non-finite values detected.

use std::path::PathBuf;
use std::process::ExitCode;

use aec_core::Error;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{load, parse_set, Loaded};

#[derive(Parser)]
#[command(name = "aec", version, about = "Full-band hybrid acoustic echo canceller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every verb that runs the pipeline.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file (unknown keys are rejected).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set pipeline.nlms.mu=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Model preset: small or large.
    #[arg(long)]
    preset: Option<String>,
    /// Weight manifest for the post-filter.
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Use seeded random post-filter weights instead of a manifest.
    #[arg(long, value_name = "SEED")]
    seed_weights: Option<u64>,
    /// Skip the post-filter and output the linear-stage error.
    #[arg(long)]
    linear_only: bool,
}

impl ConfigArgs {
    /// Resolves the configuration. Dedicated flags become overrides after
    /// the `--set` ones, so they win.
    fn resolve(&self, extra: &[String]) -> Result<Loaded, Error> {
        let mut items = self.sets.clone();
        if let Some(p) = &self.preset {
            items.push(format!("preset={}", serde_json::json!(p)));
        }
        if let Some(w) = &self.weights {
            items.push(format!("weights={}", serde_json::json!(w)));
        }
        if let Some(s) = self.seed_weights {
            items.push(format!("seed_weights={s}"));
        }
        if self.linear_only {
            items.push("pipeline.linear_only=true".into());
        }
        items.extend(extra.iter().cloned());
        let parsed = items.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>, _>>()?;
        load(self.config.as_deref(), &parsed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cancel echo in one microphone/reference pair or a whole scene set.
    Process(commands::process::ProcessArgs),
    /// Generate simulated scenes and a scene manifest.
    Simulate(commands::simulate::SimulateArgs),
    /// Score enhanced outputs against simulated scenes.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Estimate the reference-to-microphone delay.
    Delay(commands::info::DelayArgs),
    /// Measure the real-time factor on synthetic input.
    Bench(commands::info::BenchArgs),
    /// Check a weight manifest against the model graph.
    ValidateWeights(commands::info::ValidateArgs),
    /// Print the model graph and parameter counts.
    Describe(commands::info::DescribeArgs),
    /// Write a seeded weight manifest.
    InitWeights(commands::info::InitArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.root() {
                Error::Config(_) => 2,
                Error::NonFinite(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Process(a) => commands::process::run(a),
        Command::Simulate(a) => commands::simulate::run(a),
        Command::Evaluate(a) => commands::evaluate::run(a),
        Command::Delay(a) => commands::info::delay(a),
        Command::Bench(a) => commands::info::bench(a),
        Command::ValidateWeights(a) => commands::info::validate_weights(a),
        Command::Describe(a) => commands::info::describe(a),
        Command::InitWeights(a) => commands::info::init_weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
