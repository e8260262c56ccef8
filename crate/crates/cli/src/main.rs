use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ciss_core::harness::experiment::{
    latest_completed_step, resume_experiment, REPORT_SCHEMA_VERSION,
};
use ciss_core::harness::{
    ablate, compare_methods, evaluate, grid, run_experiment, seeds_from, write_curves, EvalSample,
    ExperimentData, Method, SweepReport, TrainConfig,
};
use ciss_core::segmodel::load_checkpoint;
use ciss_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "ciss",
    about = "Class-incremental segmentation experiments with adaptive prototype replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train through every incremental step and write report.json.
    Run {
        /// JSON config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from the latest completed step found in --out.
        #[arg(long)]
        resume: bool,
        /// Also write curves.png.
        #[arg(long)]
        plot: bool,
    },
    /// Evaluate a checkpoint on its run's evaluation corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run finetune, fixed_replay and adapter on the same seeds.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Component ablation: base, +ADC, +ADC+UAC, full.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One-at-a-time sweeps of beta, gamma and tau.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn print_sweep(report: &SweepReport) {
    println!("{:<14} {:>8} {:>8} {:>8}", "row", "old", "new", "all");
    for m in &report.means {
        println!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4}",
            m.label, m.old, m.new, m.all
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            method,
            seed,
            out,
            resume,
            plot,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let from = if resume {
                latest_completed_step(&out, cfg.schedule().num_steps())
            } else {
                None
            };
            let report = match from {
                Some(t) if t < cfg.schedule().num_steps() => resume_experiment(&cfg, &out, t)?,
                _ => run_experiment(&cfg, Some(&out))?,
            };
            if plot {
                write_curves(&report, &out)?;
            }
            let f = report.final_metrics;
            println!(
                "{} seed {}: old {:.4} new {:.4} all {:.4}",
                report.method.name(),
                report.seed,
                f.old.unwrap_or(f64::NAN),
                f.new.unwrap_or(f64::NAN),
                f.all.unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate { checkpoint, out } => {
            let (model, header) = load_checkpoint(&checkpoint)?;
            let cfg: TrainConfig = header
                .extra
                .clone()
                .ok_or_else(|| Error::load(&checkpoint, "checkpoint carries no experiment config"))
                .and_then(|v| {
                    serde_json::from_value(v).map_err(|e| Error::load(&checkpoint, e.to_string()))
                })?;
            let data = ExperimentData::generate(&cfg)?;
            let eval: &[EvalSample] = &data.eval;
            let metrics = evaluate(&model, eval, &data.schedule, header.step)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("eval.json");
            let body = serde_json::json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "checkpoint": checkpoint,
                "step": header.step,
                "metrics": metrics,
            });
            fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
            println!(
                "step {}: old {:.4} new {:.4} all {:.4}",
                header.step,
                metrics.miou_old.unwrap_or(f64::NAN),
                metrics.miou_new.unwrap_or(f64::NAN),
                metrics.miou_all.unwrap_or(f64::NAN)
            );
        }
        Command::Compare { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            print_sweep(&compare_methods(
                &cfg,
                &seeds_from(cfg.seed, seeds),
                Some(&out),
            )?);
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            print_sweep(&ablate(&cfg, &seeds_from(cfg.seed, seeds), Some(&out))?);
        }
        Command::Grid { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            print_sweep(&grid(&cfg, &seeds_from(cfg.seed, seeds), Some(&out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
