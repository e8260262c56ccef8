//! Loop oracles, random micro-instances and the acceptance checks shared by
//! several test targets.

#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use ciss_core::losses::{ReplayTargets, ScoredReplay};
use ciss_core::tensor::{ClassId, LabelMap, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Tensor3 {
    let data = (0..h * w * c)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor3::from_vec(h, w, c, data).unwrap()
}

/// Non-negative features, like post-activation extractor outputs.
pub fn rand_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> Tensor3 {
    let data = (0..h * w * d).map(|_| rng.random_range(0.0..2.0)).collect();
    Tensor3::from_vec(h, w, d, data).unwrap()
}

pub fn rand_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..h * w)
        .map(|_| rng.random_range(0..k) as ClassId)
        .collect();
    LabelMap::from_vec(h, w, data).unwrap()
}

/// A random batch: `n` maps of one `h × w` shape.
pub struct MicroBatch {
    pub logits: Vec<Tensor3>,
    pub features: Vec<Tensor3>,
    pub labels: Vec<LabelMap>,
    pub preds: Vec<LabelMap>,
    pub k: usize,
    pub d: usize,
}

pub fn micro_batch(rng: &mut ChaCha8Rng) -> MicroBatch {
    let n = rng.random_range(1..=3);
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let k = rng.random_range(2..=6);
    let d = rng.random_range(1..=8);
    let mut b = MicroBatch {
        logits: Vec::new(),
        features: Vec::new(),
        labels: Vec::new(),
        preds: Vec::new(),
        k,
        d,
    };
    for _ in 0..n {
        b.logits.push(rand_tensor(rng, h, w, k, 4.0));
        b.features.push(rand_features(rng, h, w, d));
        b.labels.push(rand_labels(rng, h, w, k));
        b.preds.push(rand_labels(rng, h, w, k));
    }
    b
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(z: f64, y: f64) -> f64 {
    let s = sig(z);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Index of the maximum; the first one wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..v.len() {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

fn channel_row(t: &Tensor3, y: usize, x: usize) -> Vec<f64> {
    (0..t.c).map(|ch| t.get(y, x, ch)).collect()
}

pub fn oracle_subprototype(
    features: &[Tensor3],
    masks: &[LabelMap],
    c: ClassId,
) -> Option<Vec<f64>> {
    let d = features[0].c;
    let mut sum = vec![0.0; d];
    let mut any = false;
    for (f, m) in features.iter().zip(masks) {
        for y in 0..f.h {
            for x in 0..f.w {
                if m.get(y, x) == c {
                    any = true;
                    for ch in 0..d {
                        sum[ch] += f.get(y, x, ch);
                    }
                }
            }
        }
    }
    let n = norm(&sum);
    if !any || n == 0.0 {
        return None;
    }
    Some(sum.iter().map(|v| v / n).collect())
}

/// `(unit, norm, pixels)` of the selected pixels.
pub fn oracle_center(
    features: &[Tensor3],
    select: impl Fn(usize, usize, usize) -> bool,
) -> Option<(Vec<f64>, f64, usize)> {
    let d = features[0].c;
    let mut sum = vec![0.0; d];
    let mut count = 0;
    for (i, f) in features.iter().enumerate() {
        for y in 0..f.h {
            for x in 0..f.w {
                if select(i, y, x) {
                    count += 1;
                    for ch in 0..d {
                        sum[ch] += f.get(y, x, ch);
                    }
                }
            }
        }
    }
    let n = norm(&sum);
    if count == 0 || n == 0.0 {
        return None;
    }
    Some((sum.iter().map(|v| v / n).collect(), n, count))
}

pub fn oracle_batch_centers(
    features: &[Tensor3],
    labels: &[LabelMap],
    classes: &[ClassId],
) -> BTreeMap<ClassId, (Vec<f64>, f64, usize)> {
    let mut out = BTreeMap::new();
    for &c in classes {
        if let Some(z) = oracle_center(features, |i, y, x| labels[i].get(y, x) == c) {
            out.insert(c, z);
        }
    }
    out
}

pub fn oracle_misclassified_centers(
    features: &[Tensor3],
    labels: &[LabelMap],
    preds: &[LabelMap],
    classes: &[ClassId],
) -> BTreeMap<ClassId, (Vec<f64>, f64, usize)> {
    let mut out = BTreeMap::new();
    for &c in classes {
        if let Some(z) = oracle_center(features, |i, y, x| {
            preds[i].get(y, x) == c && labels[i].get(y, x) != c
        }) {
            out.insert(c, z);
        }
    }
    out
}

/// mBCE value and its gradient w.r.t. each logit map.
pub fn oracle_mbce(
    logits: &[Tensor3],
    targets: &[LabelMap],
    replay: &[ScoredReplay],
    new_classes: &[ClassId],
    rt: ReplayTargets,
) -> (f64, Vec<Tensor3>) {
    let mut terms: Vec<(f64, f64)> = Vec::new();
    for (l, t) in logits.iter().zip(targets) {
        for y in 0..l.h {
            for x in 0..l.w {
                for k in 0..l.c {
                    let target = if t.get(y, x) as usize == k { 1.0 } else { 0.0 };
                    terms.push((l.get(y, x, k), target));
                }
            }
        }
    }
    for r in replay {
        for &c in new_classes {
            terms.push((r.logits[c as usize], 0.0));
        }
        if rt.background_positive {
            terms.push((r.logits[0], 1.0));
        }
        if rt.own_class_positive {
            terms.push((r.logits[r.class_id as usize], 1.0));
        }
    }
    let n = terms.len() as f64;
    let value = terms.iter().map(|&(z, y)| bce(z, y)).sum::<f64>() / n;
    let grads = logits
        .iter()
        .zip(targets)
        .map(|(l, t)| {
            let mut g = Tensor3::zeros(l.h, l.w, l.c);
            for y in 0..l.h {
                for x in 0..l.w {
                    for k in 0..l.c {
                        let target = if t.get(y, x) as usize == k { 1.0 } else { 0.0 };
                        g.set(y, x, k, (sig(l.get(y, x, k)) - target) / n);
                    }
                }
            }
            g
        })
        .collect();
    (value, grads)
}

/// Sigmoid MSE over old foreground channels `1..prev.c`.
pub fn oracle_kd(cur: &[Tensor3], prev: &[Tensor3]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (c, p) in cur.iter().zip(prev) {
        for y in 0..c.h {
            for x in 0..c.w {
                for k in 1..p.c {
                    let diff = sig(c.get(y, x, k)) - sig(p.get(y, x, k));
                    sum += diff * diff;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn oracle_uac(
    logits: &[Tensor3],
    gt: &[LabelMap],
    preds: &[LabelMap],
    tau: f64,
    current: &[ClassId],
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((l, g), p) in logits.iter().zip(gt).zip(preds) {
        for y in 0..l.h {
            for x in 0..l.w {
                n += 1;
                let mut s: Vec<f64> = channel_row(l, y, x).into_iter().map(sig).collect();
                let smax = s.iter().cloned().fold(f64::MIN, f64::max);
                let label = g.get(y, x);
                let agree = label == p.get(y, x) && current.contains(&label);
                if agree || smax >= tau {
                    continue;
                }
                s.sort_by(|a, b| b.total_cmp(a));
                let u = 1.0 - (s[0] - s[1]);
                sum += u * u;
            }
        }
    }
    sum / n as f64
}

/// `(new_old, pos_neg)` for the given average denominator rule.
pub fn oracle_cpd(
    features: &[Tensor3],
    labels: &[LabelMap],
    preds: &[LabelMap],
    current: &[ClassId],
    protos: &[Vec<f64>],
    eps: f64,
    all_classes: bool,
) -> (f64, f64) {
    let centers = oracle_batch_centers(features, labels, current);
    let mis = oracle_misclassified_centers(features, labels, preds, current);
    let denom = if all_classes {
        current.len()
    } else {
        centers.len()
    };
    if denom == 0 {
        return (0.0, 0.0);
    }
    let mut new_old = 0.0;
    let mut pos_neg = 0.0;
    for (c, (z, _, _)) in &centers {
        if !protos.is_empty() {
            let m = protos
                .iter()
                .map(|p| dist(z, p))
                .fold(f64::INFINITY, f64::min);
            new_old += 1.0 / (m + eps);
        }
        if let Some((zm, _, _)) = mis.get(c) {
            pos_neg += 1.0 / (dist(z, zm) + eps);
        }
    }
    (new_old / denom as f64, pos_neg / denom as f64)
}

/// Confusion matrix from image-resolution truth and feature-resolution
/// logits, mapping each pixel to the feature cell that contains it.
pub fn oracle_confusion(
    truths: &[LabelMap],
    logits: &[Tensor3],
    stride: usize,
    k: usize,
) -> Vec<Vec<u64>> {
    let mut cm = vec![vec![0u64; k]; k];
    for (t, l) in truths.iter().zip(logits) {
        for y in 0..t.h {
            for x in 0..t.w {
                let pred = argmax(&channel_row(l, y / stride, x / stride));
                cm[t.get(y, x) as usize][pred] += 1;
            }
        }
    }
    cm
}

pub fn oracle_iou(cm: &[Vec<u64>]) -> Vec<Option<f64>> {
    let k = cm.len();
    (0..k)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| cm[c][j]).sum();
            let fp: u64 = (0..k).filter(|&i| i != c).map(|i| cm[i][c]).sum();
            let union = tp + fn_ as f64 + fp as f64;
            if union == 0.0 {
                None
            } else {
                Some(tp / union)
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(numeric).max(1e-12)
}

pub fn flatten(ts: &[Tensor3]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data.iter().copied()).collect()
}
