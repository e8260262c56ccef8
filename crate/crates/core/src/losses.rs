//! Loss terms of the incremental objective and their analytic gradients.
//!
//! Every function returns the scalar loss together with its gradient with
//! respect to its differentiable inputs (logits or features). Means are taken
//! over the whole batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::predict;
use crate::tensor::{l2_distance, sigmoid, ClassId, LabelMap, Tensor3, BACKGROUND};
use crate::uncertainty::{max_sigmoid, top2, uncertainty_mask};

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - target * z + (-z.abs()).exp().ln_1p()
}

/// A replayed old-class feature after scoring by every scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredReplay {
    pub class_id: ClassId,
    pub logits: Vec<f64>,
}

/// Which scorers receive a term for each replayed feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayTargets {
    /// Background scorer gets target 1 on replayed features.
    pub background_positive: bool,
    /// The replayed class's own scorer gets target 1.
    pub own_class_positive: bool,
}

impl Default for ReplayTargets {
    fn default() -> Self {
        Self {
            background_positive: true,
            own_class_positive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbceOutput {
    pub value: f64,
    pub dlogits: Vec<Tensor3>,
    pub dreplay: Vec<Vec<f64>>,
}

/// Multi-label binary cross-entropy.
///
/// At every position scorer `k` has target 1 iff the label is `k` (background
/// included) and 0 otherwise. Each replayed feature contributes a target-0
/// term for every scorer in `new_classes`, plus the optional positives of
/// `replay_targets`. The loss is the mean over all terms.
pub fn mbce(
    logits: &[Tensor3],
    targets: &[LabelMap],
    replay: &[ScoredReplay],
    new_classes: &[ClassId],
    replay_targets: ReplayTargets,
) -> Result<MbceOutput> {
    if logits.len() != targets.len() {
        return Err(Error::contract(
            "mbce: logits and targets differ in batch size",
        ));
    }
    let mut terms: Vec<(usize, usize, f64)> = Vec::new(); // (replay idx, channel, target)
    for (i, r) in replay.iter().enumerate() {
        for &c in new_classes {
            terms.push((i, c as usize, 0.0));
        }
        if replay_targets.background_positive {
            terms.push((i, BACKGROUND as usize, 1.0));
        }
        if replay_targets.own_class_positive {
            terms.push((i, r.class_id as usize, 1.0));
        }
    }
    let mut n_terms = terms.len();
    for (l, t) in logits.iter().zip(targets) {
        if t.len() != l.positions() {
            return Err(Error::contract("mbce: label and logit resolution differ"));
        }
        if let Some(&bad) = t.data.iter().find(|&&v| v as usize >= l.c) {
            return Err(Error::contract(format!(
                "mbce: label {bad} has no scorer (K = {})",
                l.c
            )));
        }
        n_terms += l.data.len();
    }
    for (i, c, _) in &terms {
        if *c >= replay[*i].logits.len() {
            return Err(Error::contract(format!(
                "mbce: replay term for missing scorer {c}"
            )));
        }
    }
    if n_terms == 0 {
        return Ok(MbceOutput {
            value: 0.0,
            dlogits: logits
                .iter()
                .map(|l| Tensor3::zeros(l.h, l.w, l.c))
                .collect(),
            dreplay: replay.iter().map(|r| vec![0.0; r.logits.len()]).collect(),
        });
    }
    let scale = 1.0 / n_terms as f64;
    let mut sum = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    for (l, t) in logits.iter().zip(targets) {
        let mut g = Tensor3::zeros(l.h, l.w, l.c);
        for p in 0..l.positions() {
            let row = l.pixel(p);
            let label = t.data[p] as usize;
            let grow = g.pixel_mut(p);
            for k in 0..l.c {
                let y = if k == label { 1.0 } else { 0.0 };
                sum += bce_with_logits(row[k], y);
                grow[k] = (sigmoid(row[k]) - y) * scale;
            }
        }
        dlogits.push(g);
    }
    let mut dreplay: Vec<Vec<f64>> = replay.iter().map(|r| vec![0.0; r.logits.len()]).collect();
    for (i, c, y) in terms {
        let z = replay[i].logits[c];
        sum += bce_with_logits(z, y);
        dreplay[i][c] += (sigmoid(z) - y) * scale;
    }
    Ok(MbceOutput {
        value: sum * scale,
        dlogits,
        dreplay,
    })
}

/// Sigmoid-space mean squared distillation over the previous model's
/// old-class channels. Background is excluded: its meaning shifts at every
/// step as new classes are carved out of it.
pub fn kd(cur_logits: &[Tensor3], prev_logits: &[Tensor3]) -> Result<(f64, Vec<Tensor3>)> {
    if cur_logits.len() != prev_logits.len() {
        return Err(Error::contract("kd: batch sizes differ"));
    }
    let mut n = 0usize;
    for (c, p) in cur_logits.iter().zip(prev_logits) {
        if p.c > c.c || p.positions() != c.positions() {
            return Err(Error::contract(format!(
                "kd: previous model has {} channels, current {}",
                p.c, c.c
            )));
        }
        n += p.positions() * (p.c.max(1) - 1);
    }
    let mut grads: Vec<Tensor3> = cur_logits
        .iter()
        .map(|c| Tensor3::zeros(c.h, c.w, c.c))
        .collect();
    if n == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / n as f64;
    let mut sum = 0.0;
    for ((c, p), g) in cur_logits.iter().zip(prev_logits).zip(grads.iter_mut()) {
        for pos in 0..c.positions() {
            let cr = c.pixel(pos);
            let pr = p.pixel(pos);
            let gr = g.pixel_mut(pos);
            for k in 1..p.c {
                let sc = sigmoid(cr[k]);
                let diff = sc - sigmoid(pr[k]);
                sum += diff * diff;
                gr[k] = 2.0 * diff * sc * (1.0 - sc) * scale;
            }
        }
    }
    Ok((sum * scale, grads))
}

/// Uncertainty-aware constraint with explicit predictions: mean over all
/// positions of `(u·m)²`, the squared distance of the masked uncertainty
/// to a zero target. The mask is treated as a constant.
pub fn uac_with_pred(
    logits: &[Tensor3],
    gt: &[LabelMap],
    preds: &[LabelMap],
    tau: f64,
    current_classes: &[ClassId],
) -> Result<(f64, Vec<Tensor3>)> {
    let n: usize = logits.iter().map(|l| l.positions()).sum();
    let mut grads: Vec<Tensor3> = logits
        .iter()
        .map(|l| Tensor3::zeros(l.h, l.w, l.c))
        .collect();
    if n == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / n as f64;
    let mut sum = 0.0;
    for (((l, g), pred), gr) in logits.iter().zip(gt).zip(preds).zip(grads.iter_mut()) {
        if l.c < 2 {
            return Err(Error::contract("uac: need at least 2 channels"));
        }
        let smax = max_sigmoid(l);
        let mask = uncertainty_mask(g, pred, &smax, tau, current_classes);
        for p in 0..l.positions() {
            if mask[p] == 0.0 {
                continue;
            }
            let row = l.pixel(p);
            let (a, b) = top2(row);
            let (sa, sb) = (sigmoid(row[a]), sigmoid(row[b]));
            let u = 1.0 - (sa - sb);
            sum += u * u;
            let gp = gr.pixel_mut(p);
            gp[a] += -2.0 * u * sa * (1.0 - sa) * scale;
            gp[b] += 2.0 * u * sb * (1.0 - sb) * scale;
        }
    }
    Ok((sum * scale, grads))
}

/// [`uac_with_pred`] with predictions taken from `logits`.
pub fn uac(
    logits: &[Tensor3],
    gt: &[LabelMap],
    tau: f64,
    current_classes: &[ClassId],
) -> Result<(f64, Vec<Tensor3>)> {
    let preds: Vec<LabelMap> = logits.iter().map(predict).collect();
    uac_with_pred(logits, gt, &preds, tau, current_classes)
}

/// Aggregate-normalised feature centre of a pixel set.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub unit: Vec<f64>,
    pub norm: f64,
    pub pixels: usize,
}

fn masked_center<F>(features: &[Tensor3], mut select: F) -> Option<Center>
where
    F: FnMut(usize, usize) -> bool,
{
    let d = features.first()?.c;
    let mut sum = vec![0.0; d];
    let mut pixels = 0;
    for (i, f) in features.iter().enumerate() {
        for p in 0..f.positions() {
            if select(i, p) {
                pixels += 1;
                for (s, x) in sum.iter_mut().zip(f.pixel(p)) {
                    *s += x;
                }
            }
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if pixels == 0 || !(norm > 0.0) {
        return None;
    }
    Some(Center {
        unit: sum.iter().map(|x| x / norm).collect(),
        norm,
        pixels,
    })
}

/// Per-class centres of labelled pixels over the whole batch.
pub fn batch_centers(
    features: &[Tensor3],
    labels: &[LabelMap],
    classes: &[ClassId],
) -> BTreeMap<ClassId, Center> {
    classes
        .iter()
        .filter_map(|&c| masked_center(features, |i, p| labels[i].data[p] == c).map(|z| (c, z)))
        .collect()
}

/// Per-class centres of pixels predicted as `c` but labelled otherwise.
pub fn misclassified_centers(
    features: &[Tensor3],
    labels: &[LabelMap],
    preds: &[LabelMap],
    classes: &[ClassId],
) -> BTreeMap<ClassId, Center> {
    classes
        .iter()
        .filter_map(|&c| {
            masked_center(features, |i, p| {
                labels[i].data[p] != c && preds[i].data[p] == c
            })
            .map(|z| (c, z))
        })
        .collect()
}

/// How the CPD class averages are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpdAverage {
    /// Divide by the number of current classes present in the batch.
    PresentClasses,
    /// Divide by `|C^t|` regardless of presence.
    AllClasses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpdTerms {
    pub new_old: f64,
    pub pos_neg: f64,
    /// Gradient w.r.t. each unit centre `ζ_c`.
    pub grad_centers: BTreeMap<ClassId, Vec<f64>>,
    /// Gradient w.r.t. each unit misclassified centre `ζ̌_c`.
    pub grad_mis: BTreeMap<ClassId, Vec<f64>>,
}

impl CpdTerms {
    pub fn value(&self) -> f64 {
        self.new_old + self.pos_neg
    }
}

/// Inverse-distance repulsion on unit centres.
///
/// `new_old` averages `1 / (min_o ‖ζ_c − P̄_o‖ + ε)`; `pos_neg` averages
/// `1 / (‖ζ_c − ζ̌_c‖ + ε)` over classes having both centres. Both divide by
/// `denom` (classes present, or `|C^t|`). Prototypes are constants.
pub fn cpd_on_centers(
    centers: &BTreeMap<ClassId, Vec<f64>>,
    mis: &BTreeMap<ClassId, Vec<f64>>,
    protos: &[Vec<f64>],
    epsilon: f64,
    denom: usize,
) -> CpdTerms {
    let mut out = CpdTerms {
        new_old: 0.0,
        pos_neg: 0.0,
        grad_centers: centers
            .iter()
            .map(|(&c, z)| (c, vec![0.0; z.len()]))
            .collect(),
        grad_mis: mis.iter().map(|(&c, z)| (c, vec![0.0; z.len()])).collect(),
    };
    if centers.is_empty() || denom == 0 {
        return out;
    }
    let inv_n = 1.0 / denom as f64;
    // d/dz 1/(‖z − q‖ + ε) = −(z − q) / (‖z − q‖ (‖z − q‖ + ε)²)
    let pull = |z: &[f64], q: &[f64]| -> (f64, Vec<f64>) {
        let dist = l2_distance(z, q);
        let val = 1.0 / (dist + epsilon);
        let g = if dist > 0.0 {
            let k = -inv_n / (dist * (dist + epsilon) * (dist + epsilon));
            z.iter().zip(q).map(|(a, b)| k * (a - b)).collect()
        } else {
            vec![0.0; z.len()]
        };
        (val, g)
    };
    for (c, z) in centers {
        if let Some(nearest) = protos
            .iter()
            .min_by(|a, b| l2_distance(z, a).total_cmp(&l2_distance(z, b)))
        {
            let (v, g) = pull(z, nearest);
            out.new_old += v * inv_n;
            for (a, b) in out.grad_centers.get_mut(c).unwrap().iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(zm) = mis.get(c) {
            let (v, g) = pull(z, zm);
            out.pos_neg += v * inv_n;
            for (a, b) in out.grad_centers.get_mut(c).unwrap().iter_mut().zip(&g) {
                *a += b;
            }
            for (a, b) in out.grad_mis.get_mut(c).unwrap().iter_mut().zip(&g) {
                *a -= b;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpdOutput {
    pub new_old: f64,
    pub pos_neg: f64,
    pub dfeatures: Vec<Tensor3>,
}

impl CpdOutput {
    pub fn value(&self) -> f64 {
        self.new_old + self.pos_neg
    }
}

/// Back-propagates a gradient on a unit centre to the pixels that formed it.
fn spread_center_grad<F>(
    features: &[Tensor3],
    center: &Center,
    gunit: &[f64],
    dfeat: &mut [Tensor3],
    mut select: F,
) where
    F: FnMut(usize, usize) -> bool,
{
    // ζ = s/‖s‖  ⇒  dL/ds = (g − ζ (ζ·g)) / ‖s‖
    let dot: f64 = center.unit.iter().zip(gunit).map(|(a, b)| a * b).sum();
    let ds: Vec<f64> = gunit
        .iter()
        .zip(&center.unit)
        .map(|(g, z)| (g - z * dot) / center.norm)
        .collect();
    for (i, f) in features.iter().enumerate() {
        for p in 0..f.positions() {
            if select(i, p) {
                for (a, b) in dfeat[i].pixel_mut(p).iter_mut().zip(&ds) {
                    *a += b;
                }
            }
        }
    }
}

/// Compensation-based prototype discrimination over a batch, with the
/// gradient w.r.t. every feature map.
pub fn cpd(
    features: &[Tensor3],
    labels: &[LabelMap],
    preds: &[LabelMap],
    current_classes: &[ClassId],
    protos: &[Vec<f64>],
    epsilon: f64,
    average: CpdAverage,
) -> Result<CpdOutput> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let centers = batch_centers(features, labels, current_classes);
    let mis = misclassified_centers(features, labels, preds, current_classes);
    let denom = match average {
        CpdAverage::PresentClasses => centers.len(),
        CpdAverage::AllClasses => current_classes.len(),
    };
    let units =
        |m: &BTreeMap<ClassId, Center>| m.iter().map(|(&c, z)| (c, z.unit.clone())).collect();
    let terms = cpd_on_centers(&units(&centers), &units(&mis), protos, epsilon, denom);
    let mut dfeatures: Vec<Tensor3> = features
        .iter()
        .map(|f| Tensor3::zeros(f.h, f.w, f.c))
        .collect();
    for (c, z) in &centers {
        let g = &terms.grad_centers[c];
        spread_center_grad(features, z, g, &mut dfeatures, |i, p| {
            labels[i].data[p] == *c
        });
    }
    for (c, z) in &mis {
        let g = &terms.grad_mis[c];
        spread_center_grad(features, z, g, &mut dfeatures, |i, p| {
            labels[i].data[p] != *c && preds[i].data[p] == *c
        });
    }
    Ok(CpdOutput {
        new_old: terms.new_old,
        pos_neg: terms.pos_neg,
        dfeatures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub mbce: f64,
    pub kd: f64,
    pub uac: f64,
    pub cpd: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// `mbce + α·kd + β·uac + γ·cpd`.
pub fn total(
    mbce: f64,
    kd: f64,
    uac: f64,
    cpd: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<LossBundle> {
    for (name, w) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
        if !(w >= 0.0) {
            return Err(Error::config(
                name,
                format!("weight {w} must be non-negative"),
            ));
        }
    }
    Ok(LossBundle {
        mbce,
        kd,
        uac,
        cpd,
        total: mbce + alpha * kd + beta * uac + gamma * cpd,
        alpha,
        beta,
        gamma,
    })
}
