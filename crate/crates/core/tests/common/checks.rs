//! One function per acceptance criterion. Each returns a short summary on
//! success and a description of the first violation on failure.

#![allow(dead_code)]

use std::path::Path;
use std::time::Instant;

use ciss_core::adc::{adaptive_weight, compensate, run_adc, subprototype};
use ciss_core::data_synth::{build_schedule, step_pool, Setting};
use ciss_core::harness::experiment::{run_sweep, RunSummary, SweepReport};
use ciss_core::harness::{
    compare_methods, evaluate, train_step, EvalSample, ExperimentData, Method, TrainConfig,
};
use ciss_core::losses::{
    batch_centers, cpd, kd, mbce, misclassified_centers, uac, uac_with_pred, CpdAverage,
    ReplayTargets, ScoredReplay,
};
use ciss_core::prototype_store::{sample_replay, PrototypeRecord, PrototypeStore};
use ciss_core::rng::{stream_rng, Stream};
use ciss_core::segmodel::{
    load_checkpoint, predict, save_checkpoint, ModelConfig, SegModel, STRIDE,
};
use ciss_core::tensor::{sigmoid, ClassId, LabelMap, Tensor3};
use ciss_core::uncertainty::certainty_scores;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

pub type Check = std::result::Result<String, String>;

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 120;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_subset(rng: &mut ChaCha8Rng, from: std::ops::Range<usize>) -> Vec<ClassId> {
    let mut v: Vec<ClassId> = from
        .filter(|_| rng.random_bool(0.5))
        .map(|c| c as ClassId)
        .collect();
    v.sort_unstable();
    v
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn cmp_centers(
    name: &str,
    got: &BTreeMap<ClassId, ciss_core::losses::Center>,
    want: &BTreeMap<ClassId, (Vec<f64>, f64, usize)>,
) -> std::result::Result<f64, String> {
    ensure(got.len() == want.len(), || {
        format!(
            "{name}: classes {:?} vs oracle {:?}",
            got.keys(),
            want.keys()
        )
    })?;
    let mut worst = 0.0f64;
    for (c, (unit, n, pixels)) in want {
        let z = got
            .get(c)
            .ok_or_else(|| format!("{name}: class {c} missing"))?;
        ensure(z.pixels == *pixels, || {
            format!("{name}: class {c} pixel count")
        })?;
        worst = worst
            .max(max_abs_diff(&z.unit, unit))
            .max((z.norm - n).abs());
    }
    Ok(worst)
}

/// Loop-oracle agreement of every loss and aggregation helper.
pub fn oracles() -> Check {
    let mut rng = rng(0x0AC1E);
    let mut worst = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let b = micro_batch(&mut rng);
        let k = b.k;
        let classes: Vec<ClassId> = (1..k as ClassId).collect();

        for c in 0..k as ClassId {
            let got = subprototype(&b.features, &b.labels, c);
            let want = oracle_subprototype(&b.features, &b.labels, c);
            match (got, want) {
                (Some(g), Some(w)) => worst = worst.max(max_abs_diff(&g, &w)),
                (None, None) => {}
                (g, w) => {
                    return Err(format!(
                        "instance {i}: subprototype presence {g:?} vs {w:?}"
                    ))
                }
            }
        }

        let cur = random_subset(&mut rng, 1..k);
        let got = batch_centers(&b.features, &b.labels, &classes);
        let want = oracle_batch_centers(&b.features, &b.labels, &classes);
        worst = worst.max(
            cmp_centers("batch_centers", &got, &want).map_err(|e| format!("instance {i}: {e}"))?,
        );
        let got = misclassified_centers(&b.features, &b.labels, &b.preds, &classes);
        let want = oracle_misclassified_centers(&b.features, &b.labels, &b.preds, &classes);
        worst = worst.max(
            cmp_centers("misclassified_centers", &got, &want)
                .map_err(|e| format!("instance {i}: {e}"))?,
        );

        let replay: Vec<ScoredReplay> = (0..rng.random_range(0..4))
            .map(|_| ScoredReplay {
                class_id: rng.random_range(1..k) as ClassId,
                logits: (0..k).map(|_| rng.random_range(-4.0..4.0)).collect(),
            })
            .collect();
        let rt = ReplayTargets {
            background_positive: rng.random_bool(0.5),
            own_class_positive: rng.random_bool(0.5),
        };
        let out = mbce(&b.logits, &b.labels, &replay, &cur, rt).map_err(|e| e.to_string())?;
        let (v, g) = oracle_mbce(&b.logits, &b.labels, &replay, &cur, rt);
        worst = worst.max((out.value - v).abs());
        worst = worst.max(max_abs_diff(&flatten(&out.dlogits), &flatten(&g)));

        let kp = rng.random_range(1..=k);
        let prev: Vec<Tensor3> = b
            .logits
            .iter()
            .map(|l| rand_tensor(&mut rng, l.h, l.w, kp, 4.0))
            .collect();
        let (v, _) = kd(&b.logits, &prev).map_err(|e| e.to_string())?;
        worst = worst.max((v - oracle_kd(&b.logits, &prev)).abs());

        let tau = rng.random_range(0.5..0.99);
        let (v, _) =
            uac_with_pred(&b.logits, &b.labels, &b.preds, tau, &cur).map_err(|e| e.to_string())?;
        worst = worst.max((v - oracle_uac(&b.logits, &b.labels, &b.preds, tau, &cur)).abs());
        let own: Vec<LabelMap> = b.logits.iter().map(predict).collect();
        let (v, _) = uac(&b.logits, &b.labels, tau, &cur).map_err(|e| e.to_string())?;
        worst = worst.max((v - oracle_uac(&b.logits, &b.labels, &own, tau, &cur)).abs());

        let protos: Vec<Vec<f64>> = (0..rng.random_range(0..4))
            .map(|_| random_unit(&mut rng, b.d))
            .collect();
        for (avg, all) in [
            (CpdAverage::PresentClasses, false),
            (CpdAverage::AllClasses, true),
        ] {
            let out = cpd(&b.features, &b.labels, &b.preds, &cur, &protos, 1e-2, avg)
                .map_err(|e| e.to_string())?;
            let (no, pn) = oracle_cpd(&b.features, &b.labels, &b.preds, &cur, &protos, 1e-2, all);
            worst = worst
                .max((out.new_old - no).abs())
                .max((out.pos_neg - pn).abs());
        }
    }
    let ev = evaluate_oracle(&mut rng, 100)?;
    worst = worst.max(ev);
    ensure(worst <= ORACLE_TOL, || {
        format!("max deviation {worst:.3e} > {ORACLE_TOL:e}")
    })?;
    Ok(format!(
        "{ORACLE_INSTANCES} instances per op, max deviation {worst:.2e}"
    ))
}

/// Random tiny models evaluated against a per-pixel confusion oracle.
fn evaluate_oracle(rng: &mut ChaCha8Rng, instances: usize) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let nc = rng.random_range(2..=5);
        let init = rng.random_range(1..nc);
        let inc = rng.random_range(1..=nc - init);
        let schedule =
            build_schedule(nc, init, inc, Setting::Overlapped).map_err(|e| e.to_string())?;
        let t = rng.random_range(1..=schedule.num_steps());
        let side = 4 * rng.random_range(1..=3);
        let cfg = ModelConfig {
            height: side,
            width: side,
            hidden: [2, 3],
            feature_dim: rng.random_range(1..=8),
            ..ModelConfig::default()
        };
        let mut model = SegModel::new(cfg, rng).map_err(|e| e.to_string())?;
        for s in 1..=t {
            model
                .expand_head(schedule.classes_at(s), s, rng)
                .map_err(|e| e.to_string())?;
        }
        model
            .params
            .score_w
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-2.0..2.0));
        model
            .params
            .score_b
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-1.0..1.0));
        let samples: Vec<EvalSample> = (0..rng.random_range(1..=3))
            .map(|_| {
                let image = Tensor3::from_vec(
                    side,
                    side,
                    3,
                    (0..side * side * 3)
                        .map(|_| rng.random_range(0.0..1.0))
                        .collect(),
                )
                .unwrap();
                EvalSample {
                    image,
                    full_label: rand_labels(rng, side, side, nc + 1),
                }
            })
            .collect();
        let m = evaluate(&model, &samples, &schedule, t).map_err(|e| e.to_string())?;

        let known: Vec<ClassId> = schedule.classes_up_to(t);
        let truths: Vec<LabelMap> = samples
            .iter()
            .map(|s| {
                let mut l = s.full_label.clone();
                for v in l.data.iter_mut() {
                    if *v != 0 && !known.contains(v) {
                        *v = 0;
                    }
                }
                l
            })
            .collect();
        let logits: Vec<Tensor3> = samples
            .iter()
            .map(|s| model.forward(&s.image).unwrap().logits)
            .collect();
        let cm = oracle_confusion(&truths, &logits, STRIDE, known.len() + 1);
        let iou = oracle_iou(&cm);
        ensure(m.per_class_iou.len() == iou.len(), || {
            format!("evaluate instance {i}: class count")
        })?;
        for (g, w) in m.per_class_iou.iter().zip(&iou) {
            match (g, w) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                _ => {
                    return Err(format!(
                        "evaluate instance {i}: IoU presence {g:?} vs {w:?}"
                    ))
                }
            }
        }
        let mean = |ids: &[usize]| {
            let v: Vec<f64> = ids.iter().filter_map(|&c| iou[c]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let old: Vec<usize> = std::iter::once(0)
            .chain(schedule.classes_at(1).iter().map(|&c| c as usize))
            .collect();
        let all: Vec<usize> = (0..=known.len()).collect();
        for (g, w) in [(m.miou_old, mean(&old)), (m.miou_all, mean(&all))] {
            match (g, w) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                _ => return Err(format!("evaluate instance {i}: mIoU presence")),
            }
        }
    }
    Ok(worst)
}

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

/// Sorted sigmoid gaps and distance to `tau` stay clear of the FD step.
fn uac_well_posed(logits: &[Tensor3], tau: f64) -> bool {
    logits.iter().all(|l| {
        (0..l.positions()).all(|p| {
            let mut s: Vec<f64> = l.pixel(p).iter().map(|&z| sigmoid(z)).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s.windows(2).all(|w| w[0] - w[1] > 1e-4) && (s[0] - tau).abs() > 1e-4
        })
    })
}

/// Analytic UAC and CPD gradients against central differences.
pub fn gradients() -> Check {
    let mut rng = rng(0x6AAD);
    let mut worst_uac = 0.0f64;
    let mut done = 0;
    while done < 20 {
        let b = micro_batch(&mut rng);
        let tau = 0.9;
        if !uac_well_posed(&b.logits, tau) {
            continue;
        }
        let cur = random_subset(&mut rng, 1..b.k);
        let f = |l: &[Tensor3]| uac_with_pred(l, &b.labels, &b.preds, tau, &cur).unwrap();
        let (_, g) = f(&b.logits);
        let analytic = flatten(&g);
        if analytic.iter().all(|v| *v == 0.0) {
            continue;
        }
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..b.logits.len() {
            for j in 0..b.logits[i].data.len() {
                let mut plus = b.logits.clone();
                plus[i].data[j] += FD_STEP;
                let mut minus = b.logits.clone();
                minus[i].data[j] -= FD_STEP;
                numeric.push((f(&plus).0 - f(&minus).0) / (2.0 * FD_STEP));
            }
        }
        worst_uac = worst_uac.max(rel_err(&analytic, &numeric));
        done += 1;
    }

    let mut worst_cpd = 0.0f64;
    let mut done = 0;
    while done < 20 {
        let b = micro_batch(&mut rng);
        let cur: Vec<ClassId> = (1..b.k as ClassId).collect();
        let protos: Vec<Vec<f64>> = (0..rng.random_range(1..4))
            .map(|_| random_unit(&mut rng, b.d))
            .collect();
        let avg = if done % 2 == 0 {
            CpdAverage::PresentClasses
        } else {
            CpdAverage::AllClasses
        };
        let f = |x: &[Tensor3]| cpd(x, &b.labels, &b.preds, &cur, &protos, 1e-2, avg).unwrap();
        // the nearest prototype must not switch inside the FD stencil
        let centers = batch_centers(&b.features, &b.labels, &cur);
        let ambiguous = centers.values().any(|z| {
            let mut ds: Vec<f64> = protos
                .iter()
                .map(|p| {
                    z.unit
                        .iter()
                        .zip(p)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            ds.sort_by(f64::total_cmp);
            ds.len() > 1 && ds[1] - ds[0] < 1e-3
        });
        if ambiguous || centers.is_empty() {
            continue;
        }
        let analytic = flatten(&f(&b.features).dfeatures);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..b.features.len() {
            for j in 0..b.features[i].data.len() {
                let mut plus = b.features.clone();
                plus[i].data[j] += FD_STEP;
                let mut minus = b.features.clone();
                minus[i].data[j] -= FD_STEP;
                numeric.push((f(&plus).value() - f(&minus).value()) / (2.0 * FD_STEP));
            }
        }
        worst_cpd = worst_cpd.max(rel_err(&analytic, &numeric));
        done += 1;
    }
    ensure(worst_uac <= FD_TOL && worst_cpd <= FD_TOL, || {
        format!("relative error uac {worst_uac:.3e}, cpd {worst_cpd:.3e} (limit {FD_TOL:e})")
    })?;
    Ok(format!(
        "20 instances each, max relative error uac {worst_uac:.2e}, cpd {worst_cpd:.2e}"
    ))
}

/// Small, fast configuration for checks that need a trained model.
pub fn quick_config() -> TrainConfig {
    TrainConfig {
        train_corpus: 150,
        pool_size: 48,
        eval_per_step: 10,
        epochs: 4,
        batch_size: 8,
        replay_count: 8,
        ..TrainConfig::default()
    }
}

/// Drift compensation between parameter-identical models changes nothing.
pub fn adc_identity() -> Check {
    let cfg = TrainConfig {
        pool_size: 200,
        epochs: 20,
        ..quick_config()
    };
    let data = ExperimentData::generate(&cfg).map_err(|e| e.to_string())?;
    let schedule = &data.schedule;
    let mut model = SegModel::new(
        cfg.model.clone(),
        &mut stream_rng(cfg.seed, Stream::ModelInit, &[]),
    )
    .map_err(|e| e.to_string())?;
    model
        .expand_head(
            schedule.classes_at(1),
            1,
            &mut stream_rng(cfg.seed, Stream::HeadExpansion, &[1]),
        )
        .map_err(|e| e.to_string())?;
    let mut store = PrototypeStore::new(cfg.replay_count);
    let pool1 =
        step_pool(&data.train.scenes, schedule, 1, cfg.pool_size).map_err(|e| e.to_string())?;
    train_step(1, &mut model, None, &mut store, &pool1, schedule, &cfg)
        .map_err(|e| e.to_string())?;

    let pool2 =
        step_pool(&data.train.scenes, schedule, 2, cfg.pool_size).map_err(|e| e.to_string())?;
    let prev = model.clone();
    let mut observed = 0;
    let mut worst = 0.0f64;
    for tau in [0.05, 0.3, 0.7] {
        let before = model.param_hash();
        let report =
            run_adc(&prev, &model, &pool2, &store, tau, 2, 1).map_err(|e| e.to_string())?;
        ensure(model.param_hash() == before, || {
            "run_adc changed the live model".into()
        })?;
        for c in &report.classes {
            ensure(c.delta.iter().all(|v| *v == 0.0), || {
                format!("class {}: Δ = {:?}", c.class_id, c.delta)
            })?;
            let stored = &store.get(c.class_id).unwrap().proto;
            worst = worst.max(max_abs_diff(&c.compensated, stored));
            observed += c.observed_pixels;
        }
    }
    ensure(observed > 0, || {
        "no old-class pixel passed the filters; identity untested".into()
    })?;
    ensure(worst <= 1e-6, || {
        format!("compensated prototype moved by {worst:.3e}")
    })?;
    Ok(format!("{observed} observed pixels over 3 thresholds, max |P̄ − P| {worst:.1e}, live hash unchanged"))
}

/// `ρ = n/(η+n)` and the compensation identities.
pub fn adaptive_weight_laws() -> Check {
    let grid: Vec<u64> = (0..40).chain([100, 1_000, 12_345, 1 << 20]).collect();
    for &n in &grid {
        for &eta in &grid {
            let rho = adaptive_weight(n, eta);
            if n > 0 {
                ensure(rho == n as f64 / (eta as f64 + n as f64), || {
                    format!("ρ({n}, {eta}) = {rho}")
                })?;
            } else {
                ensure(rho == 0.0, || format!("ρ(0, {eta}) = {rho}"))?;
            }
            ensure((0.0..=1.0).contains(&rho), || {
                format!("ρ({n}, {eta}) = {rho} outside [0, 1]")
            })?;
            ensure(adaptive_weight(n + 1, eta) >= rho, || {
                format!("ρ not monotone in n at ({n}, {eta})")
            })?;
            ensure(adaptive_weight(n, eta + 1) <= rho, || {
                format!("ρ not antitone in η at ({n}, {eta})")
            })?;
        }
    }
    let mut rng = rng(0x4110);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=16);
        let p = random_unit(&mut rng, d);
        let delta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ensure(compensate(&p, &delta, 0.0) == p, || {
            "ρ = 0 moved the prototype".into()
        })?;
        let rho = rng.random_range(0.0..=1.0);
        let moved = compensate(&p, &delta, rho);
        let gap = moved
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let expect = rho * delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((gap - expect).abs());
    }
    ensure(worst <= 1e-9, || {
        format!("‖P̄ − P‖ − ρ‖Δ‖ reached {worst:.3e}")
    })?;
    Ok(format!(
        "{} grid points, max |‖P̄ − P‖ − ρ‖Δ‖| {worst:.1e}",
        grid.len() * grid.len()
    ))
}

/// `φ` range, permutation invariance, ties and `u = 1 − φ`.
pub fn certainty_properties() -> Check {
    let mut rng = rng(0xCE27);
    for i in 0..500 {
        let k = rng.random_range(2..=8);
        let mut l = rand_tensor(&mut rng, 3, 3, k, 6.0);
        let tied = rng.random_range(0..9);
        let row = l.pixel(tied).to_vec();
        let (a, _) = ciss_core::uncertainty::top2(&row);
        let mut others: Vec<usize> = (0..k).filter(|&j| j != a).collect();
        others.shuffle(&mut rng);
        l.pixel_mut(tied)[others[0]] = row[a];
        let cm = certainty_scores(&l).map_err(|e| e.to_string())?;
        ensure(cm.phi.iter().all(|p| (0.0..=1.0).contains(p)), || {
            format!("instance {i}: φ out of range")
        })?;
        ensure(cm.phi[tied] == 0.0, || {
            format!("instance {i}: tied top-2 gives φ = {}", cm.phi[tied])
        })?;
        ensure(cm.u.iter().zip(&cm.phi).all(|(u, p)| *u == 1.0 - p), || {
            format!("instance {i}: u ≠ 1 − φ")
        })?;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = l.clone();
        for p in 0..l.positions() {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled.pixel_mut(p)[dst] = l.pixel(p)[src];
            }
        }
        let cs = certainty_scores(&shuffled).map_err(|e| e.to_string())?;
        ensure(cs.phi == cm.phi, || {
            format!("instance {i}: φ changed under channel permutation")
        })?;
    }
    Ok("500 random maps".into())
}

/// Criterion-6 comparison on the default configuration.
pub fn method_comparison(seeds: &[u64]) -> std::result::Result<(SweepReport, f64), String> {
    let start = Instant::now();
    let report =
        compare_methods(&TrainConfig::default(), seeds, None).map_err(|e| e.to_string())?;
    Ok((report, start.elapsed().as_secs_f64()))
}

fn final_all(r: &RunSummary) -> f64 {
    r.final_metrics.all.unwrap_or(0.0)
}

fn final_old(r: &RunSummary) -> f64 {
    r.final_metrics.old.unwrap_or(0.0)
}

pub fn judge_ordering(report: &SweepReport, seconds: f64) -> Check {
    let mean = |m: Method| report.mean_for(m.name()).map(|r| r.all).unwrap_or(f64::NAN);
    let (ft, fr, ad) = (
        mean(Method::Finetune),
        mean(Method::FixedReplay),
        mean(Method::Adapter),
    );
    let ft_runs = report.runs_for(Method::Finetune.name());
    let ad_runs = report.runs_for(Method::Adapter.name());
    let mut wins = 0;
    let mut old_ok = true;
    for a in &ad_runs {
        let f = ft_runs
            .iter()
            .find(|f| f.seed == a.seed)
            .ok_or("missing finetune run")?;
        if final_all(a) - final_all(f) > 0.0 {
            wins += 1;
        }
        old_ok &= final_old(a) > final_old(f);
    }
    let summary = format!(
        "mean mIoU_all adapter {ad:.4} / fixed_replay {fr:.4} / finetune {ft:.4}; adapter > finetune on {wins}/{} seeds; {seconds:.0} s",
        ad_runs.len()
    );
    ensure(ad >= fr && fr >= ft, || {
        format!("ordering violated: {summary}")
    })?;
    ensure(wins >= 4, || format!("too few adapter wins: {summary}"))?;
    ensure(old_ok, || {
        format!("adapter mIoU_old not above finetune on every seed: {summary}")
    })?;
    ensure(seconds <= 15.0 * 60.0, || format!("too slow: {summary}"))?;
    Ok(summary)
}

/// Ablation rows not already covered by the method comparison.
pub fn ablation_extra(seeds: &[u64]) -> std::result::Result<SweepReport, String> {
    let base = TrainConfig::default();
    let rows = ciss_core::harness::experiment::ablation_rows(&base);
    let extra: Vec<(String, TrainConfig)> = rows
        .into_iter()
        .filter(|(l, _)| l == "adc" || l == "adc_uac")
        .collect();
    run_sweep("ablation", &extra, seeds, None).map_err(|e| e.to_string())
}

pub fn judge_ablation(compare: &SweepReport, extra: &SweepReport) -> Check {
    let row = |r: &SweepReport, l: &str| {
        r.mean_for(l)
            .map(|m| m.all)
            .ok_or(format!("missing row {l}"))
    };
    let means = [
        row(compare, Method::FixedReplay.name())?,
        row(extra, "adc")?,
        row(extra, "adc_uac")?,
        row(compare, Method::Adapter.name())?,
    ];
    let summary = format!(
        "mean mIoU_all base {:.4} → +ADC {:.4} → +UAC {:.4} → full {:.4}",
        means[0], means[1], means[2], means[3]
    );
    for w in means.windows(2) {
        ensure(w[1] >= w[0] - 0.01, || {
            format!("addition lost more than 0.01: {summary}")
        })?;
    }
    ensure(means[3] > means[0], || {
        format!("full not above base: {summary}")
    })?;
    Ok(summary)
}

fn read(path: &Path) -> std::result::Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Same seed gives the same bytes; persistence round-trips; resume matches.
pub fn reproducibility() -> Check {
    use ciss_core::harness::experiment::{resume_experiment, run_experiment};
    use ciss_core::prototype_store::{load_store, save_store};

    let cfg = quick_config();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    run_experiment(&cfg, Some(&a)).map_err(|e| e.to_string())?;
    run_experiment(&cfg, Some(&b)).map_err(|e| e.to_string())?;
    ensure(
        read(&a.join("report.json"))? == read(&b.join("report.json"))?,
        || "report.json differs between identical runs".into(),
    )?;

    for t in 1..=3 {
        let ckpt = a.join(format!("step_{t}.ckpt"));
        let (model, header) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
        let again = tmp.path().join(format!("again_{t}.ckpt"));
        save_checkpoint(&again, &model, header.step, header.extra.clone())
            .map_err(|e| e.to_string())?;
        ensure(read(&ckpt)? == read(&again)?, || {
            format!("checkpoint {t} does not round-trip")
        })?;
        let (reloaded, _) = load_checkpoint(&again).map_err(|e| e.to_string())?;
        ensure(reloaded == model, || {
            format!("checkpoint {t} reload differs")
        })?;

        let store = load_store(&a.join(format!("store_step_{t}"))).map_err(|e| e.to_string())?;
        let sdir = tmp.path().join(format!("store_again_{t}"));
        save_store(&sdir, &store).map_err(|e| e.to_string())?;
        ensure(
            load_store(&sdir).map_err(|e| e.to_string())? == store,
            || format!("store {t} does not round-trip"),
        )?;
    }

    std::fs::create_dir_all(&c).map_err(|e| e.to_string())?;
    for name in ["step_1.ckpt", "state_step_1.json"] {
        std::fs::copy(a.join(name), c.join(name)).map_err(|e| e.to_string())?;
    }
    let sdir = c.join("store_step_1");
    save_store(
        &sdir,
        &load_store(&a.join("store_step_1")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    resume_experiment(&cfg, &c, 1).map_err(|e| e.to_string())?;
    ensure(
        read(&a.join("report.json"))? == read(&c.join("report.json"))?,
        || "resumed run differs from the uninterrupted one".into(),
    )?;
    Ok(
        "report.json bit-identical across runs and after resume; checkpoints and stores round-trip"
            .into(),
    )
}

/// Moments of 10⁵ replay draws.
pub fn replay_statistics() -> Check {
    let mut rng = rng(0x5A3B);
    let n = 100_000usize;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for class in 1..=3u16 {
        let d = 8;
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
        let rec = PrototypeRecord {
            class_id: class,
            proto: mean.clone(),
            mean: mean.clone(),
            var: var.clone(),
            norm_mean: 0.0,
            norm_std: 0.0,
            eta: 1,
            last_step: 1,
        };
        let dir = random_unit(&mut rng, d);
        let mu = rec.replay_mean(Some(&dir));
        let draws = sample_replay(
            &mu,
            &rec.var,
            n,
            &mut stream_rng(7, Stream::Replay, &[class as u64]),
        )
        .map_err(|e| e.to_string())?;
        for j in 0..d {
            let m = draws.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            let v = draws.iter().map(|x| (x[j] - m) * (x[j] - m)).sum::<f64>() / n as f64;
            let z = (m - mu[j]).abs() / (var[j].sqrt() / (n as f64).sqrt());
            worst_mean = worst_mean.max(z);
            worst_var = worst_var.max((v - var[j]).abs() / var[j]);
        }
    }
    ensure(worst_mean <= 3.0, || {
        format!("sample mean {worst_mean:.2}σ/√N from μ̄")
    })?;
    ensure(worst_var <= 0.05, || {
        format!("sample variance off by {:.2}%", 100.0 * worst_var)
    })?;
    Ok(format!(
        "max mean offset {worst_mean:.2}·σ/√N, max variance error {:.2}%",
        100.0 * worst_var
    ))
}
