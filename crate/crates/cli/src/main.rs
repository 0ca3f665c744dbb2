//! `amnesic`: run probe-guided interventions from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data errors,
//! 4 when the probe basis saturated the representation space (outputs are
//! still written, flagged as saturated).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use amnesic_core::pipeline::{self, synthetic_spec_from_text, InterveneOutcome};
use amnesic_core::{Error, ExperimentConfig, SyntheticSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "amnesic", version, about = "Probe-guided amnesic and mnestic interventions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic natural-logic dataset.
    Synth(Common),
    /// Run iterative nullspace projection and save the probe basis.
    Inlp(Common),
    /// Run INLP, then amnesic/mnestic/control interventions.
    Intervene(Common),
    /// Sweep random-direction controls over a range of k.
    Control(Common),
    /// Aggregate trace directories into tables.
    Report {
        /// Directories holding `trace-*.json` files.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        if let pipeline::DataSource::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_spec(common: &Common) -> Result<(SyntheticSpec, PathBuf), Error> {
    let mut spec = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            synthetic_spec_from_text(&text)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok((spec, common.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"))))
}

fn print_summary(outcome: &InterveneOutcome) {
    println!(
        "k = {} directions in {} steps{}",
        outcome.inlp.basis.len(),
        outcome.inlp.basis.step_count(),
        if outcome.inlp.saturated { " (saturated)" } else { "" }
    );
    print!("{}", pipeline::delta_table_csv(&outcome.summary, true));
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Synth(common) => {
            let (spec, out) = load_spec(&common)?;
            for path in pipeline::cmd_synth(&spec, &out)? {
                println!("{}", path.display());
            }
            Ok(0)
        }
        Command::Inlp(common) => {
            let cfg = load_config(&common)?;
            let (outcome, _) = pipeline::cmd_inlp(&cfg)?;
            println!(
                "k = {} directions in {} steps; final probe accuracy {:.4}",
                outcome.basis.len(),
                outcome.basis.step_count(),
                outcome.trace.steps.last().map_or(f64::NAN, |s| s.probe_accuracy)
            );
            Ok(if outcome.saturated { 4 } else { 0 })
        }
        Command::Intervene(common) => {
            let cfg = load_config(&common)?;
            let outcome = pipeline::cmd_intervene(&cfg)?;
            print_summary(&outcome);
            Ok(if outcome.inlp.saturated { 4 } else { 0 })
        }
        Command::Control(common) => {
            let cfg = load_config(&common)?;
            let outcome = pipeline::cmd_control(&cfg)?;
            println!("mode,k,min,mean,max");
            for b in outcome.bands.iter().filter(|b| b.step >= 0) {
                println!(
                    "{},{},{:.4},{:.4},{:.4}",
                    b.mode, b.k, b.downstream_min, b.downstream_mean, b.downstream_max
                );
            }
            Ok(0)
        }
        Command::Report { traces, out } => {
            let outcome = pipeline::cmd_report(&traces, &out)?;
            print!("{}", pipeline::delta_table_csv(&outcome.deltas, false));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            let code = err.exit_code();
            eprintln!("error: {err}");
            ExitCode::from(code as u8)
        }
    }
}
