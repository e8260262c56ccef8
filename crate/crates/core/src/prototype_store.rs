//! Per-class prototypes and feature statistics, and Gaussian replay sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, normalized, ClassId, LabelMap, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub class_id: ClassId,
    /// Unit-length prototype direction.
    pub proto: Vec<f64>,
    /// Raw feature mean.
    pub mean: Vec<f64>,
    /// Per-dimension population variance.
    pub var: Vec<f64>,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Pixels that have contributed to this class so far.
    pub eta: u64,
    pub last_step: usize,
}

impl PrototypeRecord {
    /// Replay mean: the stored magnitude `‖mean‖` along `direction`
    /// (normalised first), or the stored mean when no direction is given.
    pub fn replay_mean(&self, direction: Option<&[f64]>) -> Vec<f64> {
        match direction.and_then(normalized) {
            Some(dir) => {
                let mag = l2_norm(&self.mean);
                dir.iter().map(|v| v * mag).collect()
            }
            None => self.mean.clone(),
        }
    }
}

/// First and second moments of one class's features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_id: ClassId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
    pub proto: Vec<f64>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

#[derive(Debug, Clone)]
struct Moments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    norm_mean: f64,
    norm_m2: f64,
}

/// Streaming (Welford) per-class feature moments.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    d: usize,
    classes: BTreeMap<ClassId, Moments>,
}

impl StatsAccumulator {
    pub fn new(d: usize, class_ids: &[ClassId]) -> Self {
        let classes = class_ids
            .iter()
            .map(|&c| {
                (
                    c,
                    Moments {
                        n: 0,
                        mean: vec![0.0; d],
                        m2: vec![0.0; d],
                        norm_mean: 0.0,
                        norm_m2: 0.0,
                    },
                )
            })
            .collect();
        Self { d, classes }
    }

    /// Adds every pixel of one feature map whose label is a tracked class.
    pub fn update(&mut self, features: &Tensor3, labels: &LabelMap) -> Result<()> {
        if features.c != self.d || features.positions() != labels.len() {
            return Err(Error::contract("feature map and labels disagree in shape"));
        }
        for (p, &c) in labels.data.iter().enumerate() {
            let Some(m) = self.classes.get_mut(&c) else {
                continue;
            };
            let f = features.pixel(p);
            m.n += 1;
            let n = m.n as f64;
            for j in 0..self.d {
                let delta = f[j] - m.mean[j];
                m.mean[j] += delta / n;
                m.m2[j] += delta * (f[j] - m.mean[j]);
            }
            let norm = l2_norm(f);
            let delta = norm - m.norm_mean;
            m.norm_mean += delta / n;
            m.norm_m2 += delta * (norm - m.norm_mean);
        }
        Ok(())
    }

    /// Final statistics; classes never observed are omitted with a warning.
    pub fn finish(self) -> Vec<ClassStats> {
        let mut out = Vec::new();
        for (c, m) in self.classes {
            if m.n == 0 {
                warn!("class {c} has no pixels; statistics omitted");
                continue;
            }
            let n = m.n as f64;
            let Some(proto) = normalized(&m.mean) else {
                warn!("class {c} has a zero mean feature; statistics omitted");
                continue;
            };
            out.push(ClassStats {
                class_id: c,
                var: m.m2.iter().map(|v| (v / n).max(0.0)).collect(),
                proto,
                mean: m.mean,
                count: m.n,
                norm_mean: m.norm_mean,
                norm_std: (m.norm_m2 / n).max(0.0).sqrt(),
            });
        }
        out
    }
}

pub fn compute_class_stats(
    features: &[Tensor3],
    labels: &[LabelMap],
    class_ids: &[ClassId],
) -> Result<Vec<ClassStats>> {
    if features.len() != labels.len() {
        return Err(Error::contract(
            "features and labels have different lengths",
        ));
    }
    let d = features.first().map_or(0, |f| f.c);
    let mut acc = StatsAccumulator::new(d, class_ids);
    for (f, l) in features.iter().zip(labels) {
        acc.update(f, l)?;
    }
    Ok(acc.finish())
}

/// Draws `count` samples from `Normal(mean, diag(var))`.
pub fn sample_replay<R: Rng + ?Sized>(
    mean: &[f64],
    var: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if mean.len() != var.len() {
        return Err(Error::contract("mean and variance lengths differ"));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::contract(format!("variance {v} is negative")));
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    Ok((0..count)
        .map(|_| {
            mean.iter()
                .zip(&std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect()
        })
        .collect())
}

/// Corrected direction for an old class produced by drift compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    pub class_id: ClassId,
    pub direction: Vec<f64>,
    pub observed_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeStore {
    pub records: BTreeMap<ClassId, PrototypeRecord>,
    /// Replayed features per old class per batch.
    pub replay_count: usize,
}

impl PrototypeStore {
    pub fn new(replay_count: usize) -> Self {
        Self {
            records: BTreeMap::new(),
            replay_count,
        }
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.records.keys().copied().collect()
    }

    pub fn get(&self, c: ClassId) -> Option<&PrototypeRecord> {
        self.records.get(&c)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// End-of-step update: inserts every class of `new_classes` from
    /// `new_stats`, then overwrites compensated old classes with the corrected
    /// direction (magnitude of the stored mean preserved) and adds their
    /// observed pixels to `eta`. Other old classes only get `last_step` bumped.
    pub fn finalize_step(
        &mut self,
        step: usize,
        new_classes: &[ClassId],
        new_stats: &[ClassStats],
        compensated: &[Compensation],
    ) -> Result<()> {
        for &c in new_classes {
            if !new_stats.iter().any(|s| s.class_id == c) {
                return Err(Error::contract(format!(
                    "missing statistics for new class {c}"
                )));
            }
        }
        for rec in self.records.values_mut() {
            rec.last_step = step;
        }
        for comp in compensated {
            let Some(rec) = self.records.get_mut(&comp.class_id) else {
                return Err(Error::contract(format!(
                    "compensation for unknown class {}",
                    comp.class_id
                )));
            };
            if comp.observed_pixels == 0 {
                continue;
            }
            let Some(dir) = normalized(&comp.direction) else {
                warn!(
                    "class {} compensated to a zero vector; keeping stored prototype",
                    comp.class_id
                );
                continue;
            };
            rec.mean = rec.replay_mean(Some(&dir));
            rec.proto = normalized(&rec.mean).unwrap_or(dir);
            rec.eta += comp.observed_pixels;
        }
        for s in new_stats
            .iter()
            .filter(|s| new_classes.contains(&s.class_id))
        {
            self.records.insert(
                s.class_id,
                PrototypeRecord {
                    class_id: s.class_id,
                    proto: s.proto.clone(),
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                    norm_mean: s.norm_mean,
                    norm_std: s.norm_std,
                    eta: s.count,
                    last_step: step,
                },
            );
        }
        Ok(())
    }
}

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoreIndexEntry {
    class_id: ClassId,
    dim: usize,
    eta: u64,
    last_step: usize,
    norm_mean: f64,
    norm_std: f64,
    blob: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreIndex {
    version: u32,
    replay_count: usize,
    classes: Vec<StoreIndexEntry>,
}

/// Writes `store.json` plus one `class_XXX.bin` blob per class holding
/// `proto | mean | var` as little-endian f64.
pub fn save_store(dir: &Path, store: &PrototypeStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = Vec::new();
    for rec in store.records.values() {
        let blob = format!("class_{:03}.bin", rec.class_id);
        let mut bytes = Vec::with_capacity(rec.proto.len() * 24);
        for v in rec.proto.iter().chain(&rec.mean).chain(&rec.var) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&blob);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        classes.push(StoreIndexEntry {
            class_id: rec.class_id,
            dim: rec.proto.len(),
            eta: rec.eta,
            last_step: rec.last_step,
            norm_mean: rec.norm_mean,
            norm_std: rec.norm_std,
            blob,
        });
    }
    let index = StoreIndex {
        version: STORE_VERSION,
        replay_count: store.replay_count,
        classes,
    };
    let path = dir.join("store.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn load_store(dir: &Path) -> Result<PrototypeStore> {
    let path = dir.join("store.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: StoreIndex =
        serde_json::from_slice(&bytes).map_err(|e| Error::load(&path, e.to_string()))?;
    if index.version != STORE_VERSION {
        return Err(Error::load(
            &path,
            format!("unsupported store version {}", index.version),
        ));
    }
    let mut store = PrototypeStore::new(index.replay_count);
    for e in index.classes {
        let blob_path = dir.join(&e.blob);
        let raw = fs::read(&blob_path).map_err(|err| Error::io(&blob_path, err))?;
        if raw.len() != e.dim * 24 {
            return Err(Error::load(
                &blob_path,
                "blob size does not match dimension",
            ));
        }
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.records.insert(
            e.class_id,
            PrototypeRecord {
                class_id: e.class_id,
                proto: vals[..e.dim].to_vec(),
                mean: vals[e.dim..2 * e.dim].to_vec(),
                var: vals[2 * e.dim..].to_vec(),
                norm_mean: e.norm_mean,
                norm_std: e.norm_std,
                eta: e.eta,
                last_step: e.last_step,
            },
        );
    }
    Ok(store)
}
