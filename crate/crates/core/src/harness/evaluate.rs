//! Confusion-matrix mIoU over background plus every learned class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{mask_future, Scene, TaskSchedule};
use crate::error::{Error, Result};
use crate::segmodel::{predict_full, SegModel};
use crate::tensor::{ClassId, LabelMap, Tensor3};

/// Square confusion matrix, `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::contract("truth and prediction sizes differ"));
        }
        for (&t, &p) in truth.data.iter().zip(&pred.data) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.k || p >= self.k {
                return Err(Error::contract(format!(
                    "class id out of range for {} classes",
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for a class absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.counts[c * self.k + c];
                let row: u64 = self.counts[c * self.k..(c + 1) * self.k].iter().sum();
                let col: u64 = (0..self.k).map(|r| self.counts[r * self.k + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Indexed by class ID, background first.
    pub per_class_iou: Vec<Option<f64>>,
    /// Background plus the initial step's classes.
    pub miou_old: Option<f64>,
    /// Classes added after the initial step.
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    pub confusion: ConfusionMatrix,
}

fn mean_of(ious: &[Option<f64>], classes: impl IntoIterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = classes.into_iter().filter_map(|c| ious[c]).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Splits per-class IoUs into old / new / all for step `t`.
pub fn metrics_from_confusion(
    confusion: ConfusionMatrix,
    schedule: &TaskSchedule,
    t: usize,
) -> StepMetrics {
    let ious = confusion.iou();
    let old: Vec<usize> = std::iter::once(0)
        .chain(schedule.classes_at(1).iter().map(|&c| c as usize))
        .collect();
    let new: Vec<usize> = schedule.classes_up_to(t)[schedule.classes_at(1).len()..]
        .iter()
        .map(|&c| c as usize)
        .collect();
    StepMetrics {
        step: t,
        miou_old: mean_of(&ious, old),
        miou_new: mean_of(&ious, new),
        miou_all: mean_of(&ious, 0..confusion.k),
        per_class_iou: ious,
        confusion,
    }
}

/// An evaluation sample: image plus its complete ground truth.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image: Tensor3,
    pub full_label: LabelMap,
}

impl From<&Scene> for EvalSample {
    fn from(s: &Scene) -> Self {
        Self {
            image: s.image.clone(),
            full_label: s.label.clone(),
        }
    }
}

/// Evaluates `model` after step `t`: classes from later steps count as
/// background, predictions are upsampled to image resolution.
pub fn evaluate(
    model: &SegModel,
    eval_set: &[EvalSample],
    schedule: &TaskSchedule,
    t: usize,
) -> Result<StepMetrics> {
    schedule.check_step(t)?;
    let k = schedule.scorer_count(t);
    if model.num_scorers() != k {
        return Err(Error::contract(format!(
            "model has {} scorers, step {t} needs {k}",
            model.num_scorers()
        )));
    }
    let parts = eval_set
        .par_iter()
        .map(|s| -> Result<ConfusionMatrix> {
            let truth = mask_future(&s.full_label, schedule, t);
            let pred = predict_full(&model.forward(&s.image)?.logits);
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&truth, &pred)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(k);
    for p in &parts {
        cm.merge(p);
    }
    Ok(metrics_from_confusion(cm, schedule, t))
}

/// Classes covered by step-`t` metrics: background plus `C^{1:t}`.
pub fn evaluated_classes(schedule: &TaskSchedule, t: usize) -> Vec<ClassId> {
    std::iter::once(0)
        .chain(schedule.classes_up_to(t))
        .collect()
}
