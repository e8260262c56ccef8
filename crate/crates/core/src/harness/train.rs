//! One incremental learning step.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ActiveParts, TrainConfig};
use crate::adc::{run_adc, AdcReport};
use crate::data_synth::{StepSample, TaskSchedule};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, ScoredReplay};
use crate::prototype_store::{sample_replay, ClassStats, PrototypeStore, StatsAccumulator};
use crate::rng::{stream_rng, Stream};
use crate::segmodel::{predict, ModelSnapshot, Params, SegModel, STRIDE};
use crate::tensor::{ClassId, LabelMap, Tensor3};
use crate::uncertainty::pseudo_label;

/// A pool sample with its feature-resolution targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Tensor3,
    /// Step label at feature resolution.
    pub label: LabelMap,
    /// `label` augmented with the previous model's confident predictions.
    pub target: LabelMap,
    /// Previous-model logits for distillation.
    pub prev_logits: Option<Tensor3>,
}

/// Downsamples labels and, when a previous model is given, pseudo-labels
/// and caches its logits. The previous model is frozen, so this is done
/// once per step.
pub fn prepare_pool(
    pool: &[StepSample],
    prev: Option<&SegModel>,
    tau: f64,
    old_classes: &[ClassId],
    pseudo: bool,
) -> Result<Vec<PreparedSample>> {
    pool.par_iter()
        .map(|s| {
            let label = s.label.downsample(STRIDE);
            let prev_logits = match prev {
                Some(m) => Some(m.forward(&s.image)?.logits),
                None => None,
            };
            let target = if pseudo {
                pseudo_label(&label, prev_logits.as_ref(), tau, old_classes)?
            } else {
                label.clone()
            };
            Ok(PreparedSample {
                image: s.image.clone(),
                label,
                target,
                prev_logits,
            })
        })
        .collect()
}

/// Inputs to a batch objective beyond the samples themselves.
#[derive(Debug, Clone)]
pub struct BatchContext<'a> {
    pub new_classes: &'a [ClassId],
    /// Old-class prototypes used by CPD (compensated when available).
    pub protos: Vec<Vec<f64>>,
    /// Replayed features with their class.
    pub replay: Vec<(ClassId, Vec<f64>)>,
    pub parts: ActiveParts,
    pub config: &'a TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub bundle: LossBundle,
    pub cpd_new_old: f64,
    pub cpd_pos_neg: f64,
}

/// Total objective on one batch and its gradient w.r.t. every parameter.
pub fn batch_objective(
    model: &SegModel,
    batch: &[&PreparedSample],
    ctx: &BatchContext,
) -> Result<(BatchLoss, Params)> {
    let cfg = ctx.config;
    let parts = ctx.parts;
    let passes = batch
        .par_iter()
        .map(|s| model.forward_cached(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let (outs, caches): (Vec<_>, Vec<_>) = passes.into_iter().unzip();
    let logits: Vec<Tensor3> = outs.iter().map(|o| o.logits.clone()).collect();
    let features: Vec<Tensor3> = outs.into_iter().map(|o| o.features).collect();
    let targets: Vec<LabelMap> = batch.iter().map(|s| s.target.clone()).collect();

    let scored: Vec<ScoredReplay> = ctx
        .replay
        .iter()
        .map(|(c, f)| ScoredReplay {
            class_id: *c,
            logits: model.score(f),
        })
        .collect();
    let mb = losses::mbce(
        &logits,
        &targets,
        &scored,
        ctx.new_classes,
        cfg.replay_targets,
    )?;
    let mut dlogits = mb.dlogits;

    let mut kd_value = 0.0;
    if parts.kd {
        let prev: Vec<Tensor3> = batch.iter().filter_map(|s| s.prev_logits.clone()).collect();
        if prev.len() == batch.len() {
            let (v, g) = losses::kd(&logits, &prev)?;
            kd_value = v;
            for (d, g) in dlogits.iter_mut().zip(&g) {
                for (a, b) in d.data.iter_mut().zip(&g.data) {
                    *a += cfg.alpha * b;
                }
            }
        }
    }

    let preds: Vec<LabelMap> = logits.iter().map(predict).collect();
    let mut uac_value = 0.0;
    if parts.uac {
        let (v, g) = losses::uac_with_pred(&logits, &targets, &preds, cfg.tau, ctx.new_classes)?;
        uac_value = v;
        for (d, g) in dlogits.iter_mut().zip(&g) {
            for (a, b) in d.data.iter_mut().zip(&g.data) {
                *a += cfg.beta * b;
            }
        }
    }

    let mut dfeatures: Option<Vec<Tensor3>> = None;
    let (mut cpd_no, mut cpd_pn) = (0.0, 0.0);
    if parts.cpd {
        let protos: &[Vec<f64>] = if cfg.cpd_new_old { &ctx.protos } else { &[] };
        // without the pos/neg half, use the labels as predictions so no pixel
        // counts as misclassified
        let pred_ref = if cfg.cpd_pos_neg { &preds } else { &targets };
        let out = losses::cpd(
            &features,
            &targets,
            pred_ref,
            ctx.new_classes,
            protos,
            cfg.epsilon,
            cfg.cpd_average,
        )?;
        cpd_no = out.new_old;
        cpd_pn = out.pos_neg;
        let mut df = out.dfeatures;
        for t in df.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= cfg.gamma);
        }
        dfeatures = Some(df);
    }

    let bundle = losses::total(
        mb.value,
        kd_value,
        uac_value,
        cpd_no + cpd_pn,
        cfg.alpha,
        cfg.beta,
        cfg.gamma,
    )?;

    let per_image = caches
        .par_iter()
        .enumerate()
        .map(|(i, cache)| {
            let mut g = Params::zeros_like(&model.params);
            model.backward(
                cache,
                &dlogits[i],
                dfeatures.as_ref().map(|d| &d[i]),
                &mut g,
            );
            g
        })
        .collect::<Vec<_>>();
    let mut grads = Params::zeros_like(&model.params);
    for g in &per_image {
        grads.add_assign(g);
    }
    for ((_, f), dr) in ctx.replay.iter().zip(&mb.dreplay) {
        model.scorer_backward_vec(f, dr, &mut grads);
    }
    Ok((
        BatchLoss {
            bundle,
            cpd_new_old: cpd_no,
            cpd_pos_neg: cpd_pn,
        },
        grads,
    ))
}

/// SGD with momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Params,
}

impl Sgd {
    pub fn new(model: &SegModel, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Params::zeros_like(&model.params),
        }
    }

    pub fn step(&mut self, model: &mut SegModel, grads: &Params, freeze_extractor: bool) {
        let lr = self.lr;
        let mu = self.momentum;
        for (((name, p), (_, v)), (_, g)) in model
            .params
            .named_mut()
            .into_iter()
            .zip(self.velocity.named_mut())
            .zip(grads.named())
        {
            if freeze_extractor && Params::is_extractor(&name) {
                continue;
            }
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub loss: BatchLoss,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub replay_features: usize,
    pub active: ActiveParts,
}

#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub adc_reports: Vec<AdcReport>,
    pub log: Vec<TrainLogRecord>,
    pub new_stats: Vec<ClassStats>,
}

/// Runs every epoch of step `t` on `pool`, then refreshes the prototype store.
///
/// The model must already hold scorers for `C^t`; `prev` must be present
/// from step 2 on.
pub fn train_step(
    t: usize,
    model: &mut SegModel,
    prev: Option<&ModelSnapshot>,
    store: &mut PrototypeStore,
    pool: &[StepSample],
    schedule: &TaskSchedule,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    schedule.check_step(t)?;
    let new_classes = schedule.classes_at(t).to_vec();
    if model.num_scorers() != schedule.scorer_count(t) {
        return Err(Error::contract(format!(
            "model has {} scorers, step {t} needs {}",
            model.num_scorers(),
            schedule.scorer_count(t)
        )));
    }
    if t >= 2 && prev.is_none() {
        return Err(Error::contract(
            "steps after the first need the previous model",
        ));
    }
    let parts = config.active();
    let old_classes = store.classes();
    let prev_model: Option<&SegModel> = prev.map(|p| &**p);
    let prepared = prepare_pool(
        pool,
        prev_model.filter(|_| parts.kd || parts.pseudo_label),
        config.tau,
        &old_classes,
        parts.pseudo_label,
    )?;

    let lr = if t == 1 {
        config.lr_initial
    } else {
        config.lr_incremental
    };
    let mut opt = Sgd::new(model, lr, config.momentum);
    let freeze = t >= 2 && config.model.freeze_extractor;
    let mut outcome = StepOutcome::default();
    let mut directions: Option<BTreeMap<ClassId, Vec<f64>>> = None;
    let mut iteration = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut stream_rng(
            config.seed,
            Stream::BatchOrder,
            &[t as u64, epoch as u64],
        ));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let mut replay = Vec::new();
            if parts.replay && !store.is_empty() && config.replay_count > 0 {
                let mut rng = stream_rng(
                    config.seed,
                    Stream::Replay,
                    &[t as u64, epoch as u64, b as u64],
                );
                for (c, rec) in &store.records {
                    let dir = directions
                        .as_ref()
                        .and_then(|d| d.get(c))
                        .map(|v| v.as_slice());
                    let mean = rec.replay_mean(dir);
                    for f in sample_replay(&mean, &rec.var, config.replay_count, &mut rng)? {
                        replay.push((*c, f));
                    }
                }
            }
            let protos: Vec<Vec<f64>> = store
                .records
                .iter()
                .map(
                    |(c, rec)| match directions.as_ref().and_then(|d| d.get(c)) {
                        Some(dir) => dir.clone(),
                        None => rec.proto.clone(),
                    },
                )
                .collect();
            let ctx = BatchContext {
                new_classes: &new_classes,
                protos,
                replay,
                parts,
                config,
            };
            let (loss, mut grads) = batch_objective(model, &batch, &ctx)?;
            let grad_norm = grads.norm();
            if !loss.bundle.total.is_finite() || !grad_norm.is_finite() {
                return Err(Error::Divergence {
                    step: t,
                    epoch,
                    reason: format!("non-finite loss {:?}", loss.bundle),
                });
            }
            if config.grad_clip > 0.0 && grad_norm > config.grad_clip {
                grads.scale(config.grad_clip / grad_norm);
            }
            opt.step(model, &grads, freeze);
            outcome.log.push(TrainLogRecord {
                step: t,
                epoch,
                iteration,
                loss,
                grad_norm,
                replay_features: ctx.replay.len(),
                active: parts,
            });
            iteration += 1;
        }
        if parts.adc && epoch >= config.warm_epochs && !store.is_empty() {
            let prev = prev_model.expect("checked above");
            let report = run_adc(prev, model, pool, store, config.tau, t, epoch)?;
            directions = Some(report.directions(config.renormalize_compensated));
            outcome.adc_reports.push(report);
        }
    }

    let mut acc = StatsAccumulator::new(model.feature_dim(), &new_classes);
    let feats = prepared
        .par_iter()
        .map(|s| model.extract(&s.image))
        .collect::<Result<Vec<_>>>()?;
    for (f, s) in feats.iter().zip(&prepared) {
        acc.update(f, &s.label)?;
    }
    outcome.new_stats = acc.finish();
    let compensations = outcome
        .adc_reports
        .last()
        .map(|r| r.compensations(config.renormalize_compensated))
        .unwrap_or_default();
    store.finalize_step(t, &new_classes, &outcome.new_stats, &compensations)?;
    Ok(outcome)
}
