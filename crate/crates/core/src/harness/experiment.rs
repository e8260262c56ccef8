//! End-to-end incremental runs, multi-seed comparisons and ablation sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::evaluate::{evaluate, EvalSample, StepMetrics};
use super::plot::plot_curves;
use super::train::{train_step, TrainLogRecord};
use crate::data_synth::{step_pool, Corpus, TaskSchedule};
use crate::error::{Error, Result};
use crate::prototype_store::{load_store, save_store, PrototypeStore};
use crate::rng::{stream_rng, Stream};
use crate::segmodel::{load_checkpoint, save_checkpoint, SegModel};
use crate::tensor::ClassId;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcDiagnostic {
    pub step: usize,
    pub epoch: usize,
    pub class_id: ClassId,
    pub delta_norm: f64,
    pub rho: f64,
    pub observed_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub metrics: StepMetrics,
    pub pool_size: usize,
    pub adc: Vec<AdcDiagnostic>,
    pub param_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub schedule: TaskSchedule,
    pub steps: Vec<StepRecord>,
    pub final_metrics: FinalMetrics,
}

/// Corpora shared by every method for a given seed.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub schedule: TaskSchedule,
    pub train: Corpus,
    pub eval: Vec<EvalSample>,
}

impl ExperimentData {
    pub fn generate(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule();
        let train = Corpus::generate(
            config.seed,
            Stream::TrainCorpus,
            config.train_corpus,
            &config.scene,
        )?;
        let n_eval = config.eval_per_step * schedule.num_steps();
        let eval = Corpus::generate(config.seed, Stream::EvalCorpus, n_eval, &config.scene)?
            .scenes
            .iter()
            .map(EvalSample::from)
            .collect();
        Ok(Self {
            schedule,
            train,
            eval,
        })
    }
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn checkpoint(&self, t: usize) -> PathBuf {
        self.0.join(format!("step_{t}.ckpt"))
    }

    pub fn store(&self, t: usize) -> PathBuf {
        self.0.join(format!("store_step_{t}"))
    }

    pub fn state(&self, t: usize) -> PathBuf {
        self.0.join(format!("state_step_{t}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.0.join("train_log.jsonl")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Resume point: the state saved at the end of a completed step.
struct Resume {
    step: usize,
    model: SegModel,
    store: PrototypeStore,
    records: Vec<StepRecord>,
}

fn load_resume(out: &OutputDir, t: usize, config: &TrainConfig) -> Result<Resume> {
    let (model, header) = load_checkpoint(&out.checkpoint(t))?;
    if header.step != t {
        return Err(Error::load(
            out.checkpoint(t),
            format!("checkpoint is for step {}", header.step),
        ));
    }
    let state_path = out.state(t);
    let text = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let records: Vec<StepRecord> =
        serde_json::from_slice(&text).map_err(|e| Error::load(&state_path, e.to_string()))?;
    let saved_cfg = header
        .extra
        .as_ref()
        .and_then(|v| serde_json::from_value::<TrainConfig>(v.clone()).ok());
    if saved_cfg.as_ref() != Some(config) {
        return Err(Error::load(
            out.checkpoint(t),
            "checkpoint was produced by a different config",
        ));
    }
    Ok(Resume {
        step: t,
        model,
        store: load_store(&out.store(t))?,
        records,
    })
}

/// Latest step with a complete checkpoint, store and state file.
pub fn latest_completed_step(dir: &Path, num_steps: usize) -> Option<usize> {
    let out = OutputDir(dir.to_path_buf());
    (1..=num_steps).rev().find(|&t| {
        out.checkpoint(t).exists()
            && out.store(t).join("store.json").exists()
            && out.state(t).exists()
    })
}

pub fn run_experiment(config: &TrainConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let data = ExperimentData::generate(config)?;
    run_with_data(config, &data, out, None)
}

/// Continues a run from the state saved after step `from_step` in `out`.
pub fn resume_experiment(
    config: &TrainConfig,
    out: &Path,
    from_step: usize,
) -> Result<ExperimentReport> {
    let data = ExperimentData::generate(config)?;
    run_with_data(config, &data, Some(out), Some(from_step))
}

pub fn run_with_data(
    config: &TrainConfig,
    data: &ExperimentData,
    out: Option<&Path>,
    resume_from: Option<usize>,
) -> Result<ExperimentReport> {
    config.validate()?;
    let schedule = &data.schedule;
    let out = out.map(|p| OutputDir(p.to_path_buf()));
    if let Some(o) = &out {
        fs::create_dir_all(&o.0).map_err(|e| Error::io(&o.0, e))?;
    }
    let config_json = serde_json::to_value(config)?;

    let (mut model, mut store, mut records, start) = match resume_from {
        Some(t) => {
            let o = out
                .as_ref()
                .ok_or_else(|| Error::contract("resuming needs an output directory"))?;
            let r = load_resume(o, t, config)?;
            (r.model, r.store, r.records, r.step + 1)
        }
        None => {
            if let Some(o) = &out {
                let _ = fs::remove_file(o.train_log());
            }
            let mut rng = stream_rng(config.seed, Stream::ModelInit, &[]);
            let model = SegModel::new(config.model.clone(), &mut rng)?;
            (
                model,
                PrototypeStore::new(config.replay_count),
                Vec::new(),
                1,
            )
        }
    };

    for t in start..=schedule.num_steps() {
        let prev = (t >= 2).then(|| model.snapshot());
        let mut rng = stream_rng(config.seed, Stream::HeadExpansion, &[t as u64]);
        model.expand_head(schedule.classes_at(t), t, &mut rng)?;
        let pool = step_pool(&data.train.scenes, schedule, t, config.pool_size)?;
        info!(
            "{} seed {}: step {t} with {} samples",
            config.method.name(),
            config.seed,
            pool.len()
        );
        let outcome = match train_step(
            t,
            &mut model,
            prev.as_ref(),
            &mut store,
            &pool,
            schedule,
            config,
        ) {
            Ok(o) => o,
            Err(e) => {
                if let (Error::Divergence { .. }, Some(o)) = (&e, &out) {
                    save_checkpoint(
                        &o.0.join("diverged.ckpt"),
                        &model,
                        t,
                        Some(config_json.clone()),
                    )?;
                }
                return Err(e);
            }
        };
        let metrics = evaluate(&model, &data.eval, schedule, t)?;
        let adc = outcome
            .adc_reports
            .iter()
            .flat_map(|r| {
                r.classes.iter().map(move |c| AdcDiagnostic {
                    step: r.step,
                    epoch: r.epoch,
                    class_id: c.class_id,
                    delta_norm: c.delta_norm,
                    rho: c.rho,
                    observed_pixels: c.observed_pixels,
                })
            })
            .collect();
        records.push(StepRecord {
            metrics,
            pool_size: pool.len(),
            adc,
            param_hash: model.param_hash(),
        });
        if let Some(o) = &out {
            save_checkpoint(&o.checkpoint(t), &model, t, Some(config_json.clone()))?;
            save_store(&o.store(t), &store)?;
            write_json(&o.state(t), &records)?;
            append_log(&o.train_log(), &outcome.log)?;
        }
    }

    let last = records.last().map(|r| &r.metrics);
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: config.method,
        seed: config.seed,
        config_hash: config.hash(),
        config: config.clone(),
        schedule: schedule.clone(),
        final_metrics: FinalMetrics {
            old: last.and_then(|m| m.miou_old),
            new: last.and_then(|m| m.miou_new),
            all: last.and_then(|m| m.miou_all),
        },
        steps: records,
    };
    if let Some(o) = &out {
        write_json(&o.report(), &report)?;
    }
    Ok(report)
}

/// Writes `curves.png` next to the report.
pub fn write_curves(report: &ExperimentReport, dir: &Path) -> Result<()> {
    plot_curves(
        &[(report.method.name().to_string(), &report.steps)],
        &dir.join("curves.png"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub final_metrics: FinalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMean {
    pub label: String,
    pub old: f64,
    pub new: f64,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub kind: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub means: Vec<RowMean>,
}

impl SweepReport {
    pub fn runs_for(&self, label: &str) -> Vec<&RunSummary> {
        self.runs.iter().filter(|r| r.label == label).collect()
    }

    pub fn mean_for(&self, label: &str) -> Option<&RowMean> {
        self.means.iter().find(|m| m.label == label)
    }
}

/// Runs every `(label, config)` row on every seed. Rows for one seed share
/// the same generated corpora.
pub fn run_sweep(
    kind: &str,
    rows: &[(String, TrainConfig)],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SweepReport> {
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..rows.len()).map(move |r| (s, r)))
        .collect();
    let data: Vec<ExperimentData> = seeds
        .par_iter()
        .map(|&s| ExperimentData::generate(&rows[0].1.with_seed(s)))
        .collect::<Result<_>>()?;
    let results = jobs
        .par_iter()
        .map(|&(seed, r)| {
            let (label, cfg) = &rows[r];
            let cfg = cfg.with_seed(seed);
            let si = seeds.iter().position(|&s| s == seed).expect("seed listed");
            let dir = out.map(|o| o.join(format!("{label}_seed{seed}")));
            let report = run_with_data(&cfg, &data[si], dir.as_deref(), None)?;
            Ok(RunSummary {
                label: label.clone(),
                seed,
                final_metrics: report.final_metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means = rows
        .iter()
        .map(|(label, _)| {
            let rs: Vec<&RunSummary> = results.iter().filter(|r| &r.label == label).collect();
            let avg = |f: fn(&FinalMetrics) -> Option<f64>| {
                rs.iter()
                    .map(|r| f(&r.final_metrics).unwrap_or(0.0))
                    .sum::<f64>()
                    / rs.len().max(1) as f64
            };
            RowMean {
                label: label.clone(),
                old: avg(|m| m.old),
                new: avg(|m| m.new),
                all: avg(|m| m.all),
            }
        })
        .collect();
    let report = SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: kind.to_string(),
        seeds: seeds.to_vec(),
        runs: results,
        means,
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        write_json(&o.join(format!("{kind}.json")), &report)?;
    }
    Ok(report)
}

pub fn seeds_from(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base + i).collect()
}

/// finetune / fixed_replay / adapter on identical seeds and corpora.
pub fn compare_methods(
    config: &TrainConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SweepReport> {
    let rows: Vec<(String, TrainConfig)> = Method::ALL
        .iter()
        .map(|&m| (m.name().to_string(), config.with_method(m)))
        .collect();
    run_sweep("compare", &rows, seeds, out)
}

/// Component ablation rows: base, +ADC, +ADC+UAC, full.
pub fn ablation_rows(config: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let adapter = |adc, uac, cpd| TrainConfig {
        method: Method::Adapter,
        adc,
        uac,
        cpd,
        ..config.clone()
    };
    vec![
        ("base".to_string(), config.with_method(Method::FixedReplay)),
        ("adc".to_string(), adapter(true, false, false)),
        ("adc_uac".to_string(), adapter(true, true, false)),
        ("full".to_string(), adapter(true, true, true)),
    ]
}

pub fn ablate(config: &TrainConfig, seeds: &[u64], out: Option<&Path>) -> Result<SweepReport> {
    run_sweep("ablation", &ablation_rows(config), seeds, out)
}

/// One-at-a-time sweeps over β, γ and τ around the config's values.
pub fn grid_rows(config: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let base = config.with_method(Method::Adapter);
    let mut rows = Vec::new();
    for v in [0.01, 0.05, 0.1, 0.5, 1.0] {
        rows.push((
            format!("beta_{v}"),
            TrainConfig {
                beta: v,
                ..base.clone()
            },
        ));
    }
    for v in [0.01, 0.05, 0.1, 0.5, 1.0] {
        rows.push((
            format!("gamma_{v}"),
            TrainConfig {
                gamma: v,
                ..base.clone()
            },
        ));
    }
    for v in [0.5, 0.6, 0.7, 0.8, 0.9] {
        rows.push((
            format!("tau_{v}"),
            TrainConfig {
                tau: v,
                ..base.clone()
            },
        ));
    }
    rows
}

pub fn grid(config: &TrainConfig, seeds: &[u64], out: Option<&Path>) -> Result<SweepReport> {
    run_sweep("grid", &grid_rows(config), seeds, out)
}
