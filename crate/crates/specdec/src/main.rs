//! Experiment CLI: each subcommand reads one TOML config file and reads or
//! writes versioned artifacts in the configured output directory
//! (overridable via `SPECDEC_OUT_DIR`).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use specdec::harness::{
    self, load_report, stage_extract_features, stage_oracle_stats, stage_run,
    stage_train_classifier, stage_train_models, stage_tune, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "specdec", about = "Speculative decoding experiment driver", version)]
struct Cli {
    /// Path to the experiment config (TOML).
    #[arg(short, long, default_value = "specdec.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target and draft n-gram models on the training split.
    TrainModels,
    /// Extract teacher-forced classifier features for train/valid splits.
    ExtractFeatures,
    /// Train the halting classifier on the extracted features.
    TrainClassifier,
    /// Grid-search policy hyperparameters on the validation split.
    Tune,
    /// Run the policy comparison on the test split and write the report.
    Run,
    /// Compute oracle lookahead statistics over the test split.
    OracleStats,
    /// Print the previously written report.
    Report,
    /// Run the whole pipeline: train, extract, classify, tune, run.
    Pipeline,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    match cli.command {
        Command::TrainModels => {
            stage_train_models(&cfg)?;
            println!("models written to {}", cfg.out_dir.display());
        }
        Command::ExtractFeatures => {
            stage_extract_features(&cfg)?;
            println!("features written to {}", cfg.out_dir.display());
        }
        Command::TrainClassifier => {
            stage_train_classifier(&cfg)?;
            println!("classifier written to {}", cfg.out_dir.display());
        }
        Command::Tune => {
            let tuned = stage_tune(&cfg)?;
            println!(
                "tuned: static gamma={} tau={} sl_max={} tau_ppl={}",
                tuned.gamma_static, tuned.tau, tuned.sl_max, tuned.tau_ppl
            );
        }
        Command::Run => {
            let report = stage_run(&cfg)?;
            print!("{}", report.render());
        }
        Command::OracleStats => {
            let stats = stage_oracle_stats(&cfg)?;
            println!("oracle SL mean={:.3} std={:.3}", stats.mean_sl, stats.std_sl);
            println!("stats written to {}", cfg.out_dir.display());
        }
        Command::Report => {
            let report = load_report(&cfg)?;
            print!("{}", report.render());
        }
        Command::Pipeline => {
            let report = harness::run_pipeline(&cfg)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
