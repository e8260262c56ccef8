//! Training-free drift compensation of stored old-class prototypes.
//!
//! Old-class pixels that both the previous and the live model confidently
//! agree on (inside background regions of the current labels) give two
//! sub-prototypes, one per extractor. Their difference estimates the drift;
//! the stored prototype moves along it with a weight `ρ = n / (η + n)` that
//! balances new evidence `n` against the pixels `η` already accumulated.

use std::collections::BTreeMap;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::StepSample;
use crate::error::Result;
use crate::prototype_store::{Compensation, PrototypeStore};
use crate::segmodel::{SegModel, STRIDE};
use crate::tensor::{l2_norm, normalized, ClassId, LabelMap, Tensor3, BACKGROUND};
use crate::uncertainty::{certainty_scores, filtered_prediction};

/// Keeps positions where both filtered maps agree on a non-background class.
pub fn unified_masks(filtered_cur: &LabelMap, filtered_prev: &LabelMap) -> LabelMap {
    let data = filtered_cur
        .data
        .iter()
        .zip(&filtered_prev.data)
        .map(|(&a, &b)| if a == b { a } else { BACKGROUND })
        .collect();
    LabelMap {
        h: filtered_cur.h,
        w: filtered_cur.w,
        data,
    }
}

/// Sum of the masked features of class `c` across the pool, divided by the
/// norm of that sum. `None` when no pixel matched or the sum is zero.
pub fn subprototype(features: &[Tensor3], masks: &[LabelMap], c: ClassId) -> Option<Vec<f64>> {
    let d = features.first()?.c;
    let mut sum = vec![0.0; d];
    let mut hit = false;
    for (f, m) in features.iter().zip(masks) {
        for (p, &v) in m.data.iter().enumerate() {
            if v == c {
                hit = true;
                for (s, x) in sum.iter_mut().zip(f.pixel(p)) {
                    *s += x;
                }
            }
        }
    }
    if !hit {
        return None;
    }
    let out = normalized(&sum);
    if out.is_none() {
        debug!("class {c}: zero-norm aggregate, sub-prototype absent");
    }
    out
}

/// Displacement from the previous to the current sub-prototype.
pub fn deviation(prev: &[f64], cur: &[f64]) -> Vec<f64> {
    cur.iter().zip(prev).map(|(c, p)| c - p).collect()
}

/// `ρ = n / (η + n)`; zero when nothing was observed.
pub fn adaptive_weight(observed: u64, eta: u64) -> f64 {
    if observed == 0 {
        return 0.0;
    }
    observed as f64 / (eta as f64 + observed as f64)
}

/// `ρ·(P + Δ) + (1 − ρ)·P`.
pub fn compensate(stored: &[f64], delta: &[f64], rho: f64) -> Vec<f64> {
    stored
        .iter()
        .zip(delta)
        .map(|(p, d)| rho * (p + d) + (1.0 - rho) * p)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcClassReport {
    pub class_id: ClassId,
    pub subproto_prev: Option<Vec<f64>>,
    pub subproto_cur: Option<Vec<f64>>,
    /// Zero when either sub-prototype is absent.
    pub delta: Vec<f64>,
    pub delta_norm: f64,
    pub rho: f64,
    /// Compensated prototype before any renormalisation.
    pub compensated: Vec<f64>,
    pub observed_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcReport {
    pub step: usize,
    pub epoch: usize,
    pub classes: Vec<AdcClassReport>,
}

impl AdcReport {
    /// Direction to use downstream for each class: the compensated prototype,
    /// renormalised to unit length when requested.
    pub fn directions(&self, renormalize: bool) -> BTreeMap<ClassId, Vec<f64>> {
        self.classes
            .iter()
            .map(|c| {
                let dir = if renormalize {
                    normalized(&c.compensated).unwrap_or_else(|| c.compensated.clone())
                } else {
                    c.compensated.clone()
                };
                (c.class_id, dir)
            })
            .collect()
    }

    pub fn compensations(&self, renormalize: bool) -> Vec<Compensation> {
        let dirs = self.directions(renormalize);
        self.classes
            .iter()
            .map(|c| Compensation {
                class_id: c.class_id,
                direction: dirs[&c.class_id].clone(),
                observed_pixels: c.observed_pixels,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Partial {
    counts: BTreeMap<ClassId, u64>,
    sum_prev: BTreeMap<ClassId, Vec<f64>>,
    sum_cur: BTreeMap<ClassId, Vec<f64>>,
}

/// Full compensation pass over a step pool. Both models are only read.
pub fn run_adc(
    prev: &SegModel,
    live: &SegModel,
    pool: &[StepSample],
    store: &PrototypeStore,
    tau: f64,
    step: usize,
    epoch: usize,
) -> Result<AdcReport> {
    let old = store.classes();
    let d = live.feature_dim();
    let partials = pool
        .par_iter()
        .map(|s| -> Result<Partial> {
            let gt = s.label.downsample(STRIDE);
            let fp = prev.forward(&s.image)?;
            let fc = live.forward(&s.image)?;
            let cp = certainty_scores(&fp.logits)?;
            let cc = certainty_scores(&fc.logits)?;
            let yp = filtered_prediction(&fp.logits, &cp, &gt, tau, &old);
            let yc = filtered_prediction(&fc.logits, &cc, &gt, tau, &old);
            let unified = unified_masks(&yc, &yp);
            let mut part = Partial {
                counts: BTreeMap::new(),
                sum_prev: BTreeMap::new(),
                sum_cur: BTreeMap::new(),
            };
            for (p, &c) in unified.data.iter().enumerate() {
                if c == BACKGROUND {
                    continue;
                }
                *part.counts.entry(c).or_default() += 1;
                let sp = part.sum_prev.entry(c).or_insert_with(|| vec![0.0; d]);
                for (a, b) in sp.iter_mut().zip(fp.features.pixel(p)) {
                    *a += b;
                }
                let sc = part.sum_cur.entry(c).or_insert_with(|| vec![0.0; d]);
                for (a, b) in sc.iter_mut().zip(fc.features.pixel(p)) {
                    *a += b;
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;

    // ordered reduction keeps floating-point sums deterministic
    let mut counts: BTreeMap<ClassId, u64> = BTreeMap::new();
    let mut sum_prev: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    let mut sum_cur: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for part in partials {
        for (c, n) in part.counts {
            *counts.entry(c).or_default() += n;
        }
        for (src, dst) in [(part.sum_prev, &mut sum_prev), (part.sum_cur, &mut sum_cur)] {
            for (c, v) in src {
                let acc = dst.entry(c).or_insert_with(|| vec![0.0; d]);
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
    }

    let mut classes = Vec::with_capacity(old.len());
    for &c in &old {
        let rec = store.get(c).expect("listed class");
        let n = counts.get(&c).copied().unwrap_or(0);
        let sub_prev = sum_prev.get(&c).and_then(|v| normalized(v));
        let sub_cur = sum_cur.get(&c).and_then(|v| normalized(v));
        let (delta, rho) = match (&sub_prev, &sub_cur) {
            (Some(p), Some(q)) => (deviation(p, q), adaptive_weight(n, rec.eta)),
            _ => (vec![0.0; d], 0.0),
        };
        let compensated = if rho == 0.0 {
            rec.proto.clone()
        } else {
            compensate(&rec.proto, &delta, rho)
        };
        classes.push(AdcClassReport {
            class_id: c,
            delta_norm: l2_norm(&delta),
            subproto_prev: sub_prev,
            subproto_cur: sub_cur,
            delta,
            rho,
            compensated,
            observed_pixels: if rho == 0.0 { 0 } else { n },
        });
    }
    Ok(AdcReport {
        step,
        epoch,
        classes,
    })
}
