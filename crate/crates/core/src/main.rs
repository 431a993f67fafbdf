use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairtune::harness::{self, ExperimentConfig, SweepAxis, SweepReport};
use fairtune::mask::Criterion;
use fairtune::train::TopK;
use fairtune::Error;

/// Fairness-aware selective fine-tuning experiments.
#[derive(Parser)]
#[command(name = "fairtune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset triplet and test set for one seed.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured strategy for every seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the run grid along one ablation axis.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// topk, bias_ratio, syn_amount or layer_freeze.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model on a CSV dataset and print the flat report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute the selection mask of a saved model.
    Mask {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic_biased: PathBuf,
        #[arg(long)]
        synthetic_balanced: PathBuf,
        #[arg(long, default_value = "absolute_difference")]
        criterion: Criterion,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Write the mask here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> fairtune::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn summarize(report: &SweepReport, out: &Path) -> ExitCode {
    for row in &report.rows {
        match row.mean {
            Some(m) => println!(
                "{:<24} {:<24} acc {:.4}  wst {:.4}  eo {:.4}  std {:.4}  ({} ok, {} failed)",
                row.point, row.strategy, m.acc, m.wst, m.eo, m.std, row.seeds_ok, row.seeds_failed
            ),
            None => println!("{:<24} {:<24} all {} seeds failed", row.point, row.strategy, row.seeds_failed),
        }
    }
    for f in report.failures() {
        if let harness::RunStatus::Failed { error, hint } = &f.status {
            eprintln!("failed: {} {} seed {}: {error}", f.point, f.strategy, f.seed);
            if let Some(h) = hint {
                eprintln!("  hint: {h}");
            }
        }
    }
    println!("report written to {}", out.display());
    if report.has_failures() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = harness::resolve_output_dir(out.as_deref(), &cfg).join(format!("seed_{seed}"));
            let manifest = harness::cmd_gen_data(&cfg, seed, &dir)?;
            for d in &manifest.datasets {
                println!("{:<24} {:>6} rows  {}", d.file, d.rows, d.fingerprint);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = harness::resolve_output_dir(out.as_deref(), &cfg);
            let report = harness::cmd_run(&cfg, Some(&dir))?;
            Ok(summarize(&report, &dir))
        }
        Command::Sweep { config, axis, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = harness::resolve_output_dir(out.as_deref(), &cfg);
            let report = harness::cmd_sweep(&cfg, axis, Some(&dir))?;
            Ok(summarize(&report, &dir))
        }
        Command::Eval { model, data } => {
            let report = harness::cmd_eval(&model, &data)?;
            println!("{}", report.to_json());
            Ok(ExitCode::SUCCESS)
        }
        Command::Mask { model, real, synthetic_biased, synthetic_balanced, criterion, k, out } => {
            let (mask, _) = harness::cmd_mask(
                &model,
                &real,
                &synthetic_biased,
                &synthetic_balanced,
                criterion,
                TopK::Count(k),
            )?;
            match out {
                Some(p) => mask.save(&p)?,
                None => print!("{}", mask.to_text()),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
