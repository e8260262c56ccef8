//! Certainty scores, confidence-filtered predictions, the uncertainty mask
//! and pseudo-labeling against the previous model.

use crate::error::{Error, Result};
use crate::segmodel::predict;
use crate::tensor::{sigmoid, ClassId, LabelMap, Tensor3, BACKGROUND};

/// Per-position certainty `φ` (top-1 minus top-2 sigmoid score) and
/// uncertainty `u = 1 − φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyMap {
    pub h: usize,
    pub w: usize,
    pub phi: Vec<f64>,
    pub u: Vec<f64>,
}

/// Channel indices of the largest and second-largest entries. Ties keep the
/// lower index first.
pub fn top2(row: &[f64]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
    let (mut a, mut b) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
    for (k, &v) in row.iter().enumerate().skip(2) {
        if v > row[a] {
            b = a;
            a = k;
        } else if v > row[b] {
            b = k;
        }
    }
    (a, b)
}

pub fn certainty_scores(logits: &Tensor3) -> Result<CertaintyMap> {
    if logits.c < 2 {
        return Err(Error::contract(format!(
            "certainty needs at least 2 channels, got {}",
            logits.c
        )));
    }
    let n = logits.positions();
    let mut phi = Vec::with_capacity(n);
    for p in 0..n {
        let row = logits.pixel(p);
        let (a, b) = top2(row);
        phi.push((sigmoid(row[a]) - sigmoid(row[b])).clamp(0.0, 1.0));
    }
    let u = phi.iter().map(|f| 1.0 - f).collect();
    Ok(CertaintyMap {
        h: logits.h,
        w: logits.w,
        phi,
        u,
    })
}

/// Largest sigmoid score per position.
pub fn max_sigmoid(logits: &Tensor3) -> Vec<f64> {
    (0..logits.positions())
        .map(|p| {
            let m = logits
                .pixel(p)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            sigmoid(m)
        })
        .collect()
}

/// Keeps the predicted class where the ground truth is background, the
/// certainty reaches `tau`, and the prediction is one of `allowed`; 0 elsewhere.
pub fn filtered_prediction(
    logits: &Tensor3,
    certainty: &CertaintyMap,
    gt_label: &LabelMap,
    tau: f64,
    allowed: &[ClassId],
) -> LabelMap {
    debug_assert_eq!(gt_label.len(), logits.positions());
    let pred = predict(logits);
    let data = pred
        .data
        .iter()
        .zip(&gt_label.data)
        .zip(&certainty.phi)
        .map(|((&p, &g), &phi)| {
            if g == BACKGROUND && phi >= tau && allowed.contains(&p) {
                p
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelMap {
        h: pred.h,
        w: pred.w,
        data,
    }
}

/// Mask that is 0 where a current-step class is predicted correctly or the
/// model is already confident (`max sigmoid ≥ tau`), 1 elsewhere.
pub fn uncertainty_mask(
    gt_label: &LabelMap,
    pred: &LabelMap,
    sigmoid_max: &[f64],
    tau: f64,
    current_classes: &[ClassId],
) -> Vec<f64> {
    gt_label
        .data
        .iter()
        .zip(&pred.data)
        .zip(sigmoid_max)
        .map(|((&g, &p), &s)| {
            if (g == p && current_classes.contains(&g)) || s >= tau {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Replaces background positions of `step_label` by the previous model's
/// confident old-class predictions. With no previous model this is the identity.
pub fn pseudo_label(
    step_label: &LabelMap,
    prev_logits: Option<&Tensor3>,
    tau: f64,
    old_classes: &[ClassId],
) -> Result<LabelMap> {
    let Some(prev) = prev_logits else {
        return Ok(step_label.clone());
    };
    if prev.h != step_label.h || prev.w != step_label.w {
        return Err(Error::contract(
            "previous logits and label resolution differ",
        ));
    }
    let cert = certainty_scores(prev)?;
    let filtered = filtered_prediction(prev, &cert, step_label, tau, old_classes);
    let data = step_label
        .data
        .iter()
        .zip(&filtered.data)
        .map(|(&g, &f)| if g == BACKGROUND { f } else { g })
        .collect();
    Ok(LabelMap {
        h: step_label.h,
        w: step_label.w,
        data,
    })
}
