//! Synthetic segmentation scenes and the class-incremental relabeling protocol.
//!
//! Each foreground class is a geometric primitive family with its own colour
//! distribution. Scenes are pure functions of `(seed, SceneConfig)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};
use crate::tensor::{ClassId, LabelMap, Tensor3, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Step-t backgrounds may contain old and future classes.
    Overlapped,
    /// Scenes containing future-step classes are dropped from a step's pool.
    Disjoint,
}

/// Partition of foreground classes `1..=num_classes` into learning steps.
///
/// Steps are numbered from 1; `steps[t - 1]` holds the classes of step `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub num_classes: usize,
    pub init_count: usize,
    pub inc_count: usize,
    pub steps: Vec<Vec<ClassId>>,
    pub setting: Setting,
}

pub fn build_schedule(
    num_classes: usize,
    init_count: usize,
    inc_count: usize,
    setting: Setting,
) -> Result<TaskSchedule> {
    if num_classes == 0 || num_classes > ClassId::MAX as usize {
        return Err(Error::config(
            "num_classes",
            format!("{num_classes} is out of range"),
        ));
    }
    if init_count < 1 {
        return Err(Error::config("init_count", "must be at least 1"));
    }
    if inc_count < 1 {
        return Err(Error::config("inc_count", "must be at least 1"));
    }
    // a short final step is allowed, but there must be at least one incremental class
    if init_count >= num_classes {
        return Err(Error::config(
            "init_count",
            format!("init_count = {init_count} leaves no incremental classes out of {num_classes}"),
        ));
    }
    let mut steps = vec![(1..=init_count as ClassId).collect::<Vec<_>>()];
    let mut next = init_count + 1;
    while next <= num_classes {
        let end = (next + inc_count - 1).min(num_classes);
        steps.push((next as ClassId..=end as ClassId).collect());
        next = end + 1;
    }
    Ok(TaskSchedule {
        num_classes,
        init_count,
        inc_count,
        steps,
        setting,
    })
}

impl TaskSchedule {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps.len() {
            Err(Error::contract(format!(
                "step {t} outside 1..={}",
                self.steps.len()
            )))
        } else {
            Ok(())
        }
    }

    /// Classes introduced at step `t`.
    pub fn classes_at(&self, t: usize) -> &[ClassId] {
        &self.steps[t - 1]
    }

    /// `C^{1:t}`; empty for `t = 0`.
    pub fn classes_up_to(&self, t: usize) -> Vec<ClassId> {
        self.steps[..t.min(self.steps.len())]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Classes belonging to steps after `t`.
    pub fn future_classes(&self, t: usize) -> Vec<ClassId> {
        self.steps[t.min(self.steps.len())..]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn step_of(&self, class: ClassId) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.contains(&class))
            .map(|i| i + 1)
    }

    /// Scorer count after step `t`: background plus every learned class.
    pub fn scorer_count(&self, t: usize) -> usize {
        1 + self.classes_up_to(t).len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    /// Minimum fraction of image pixels each present class must occupy.
    pub min_share: f64,
    pub max_share: f64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise_sigma: f64,
    /// Per-instance colour jitter standard deviation.
    pub color_jitter: f64,
    /// Shape radius range as a fraction of `min(height, width)`.
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 6,
            min_classes: 1,
            max_classes: 3,
            min_share: 0.05,
            max_share: 0.6,
            noise_sigma: 0.05,
            color_jitter: 0.06,
            min_radius: 0.16,
            max_radius: 0.32,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("height", "image dimensions must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if self.min_classes == 0 || self.min_classes > self.max_classes {
            return Err(Error::config(
                "min_classes",
                "need 1 <= min_classes <= max_classes",
            ));
        }
        if self.max_classes > self.num_classes {
            return Err(Error::config("max_classes", "exceeds num_classes"));
        }
        if !(0.0..1.0).contains(&self.min_share)
            || self.min_share > self.max_share
            || self.max_share > 1.0
        {
            return Err(Error::config(
                "min_share",
                "need 0 <= min_share <= max_share <= 1",
            ));
        }
        if self.noise_sigma < 0.0 || self.color_jitter < 0.0 {
            return Err(Error::config(
                "noise_sigma",
                "noise levels must be non-negative",
            ));
        }
        if self.min_radius <= 0.0 || self.min_radius > self.max_radius {
            return Err(Error::config(
                "min_radius",
                "need 0 < min_radius <= max_radius",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// `H × W × 3` image with values in `[0, 1]`.
    pub image: Tensor3,
    pub label: LabelMap,
    /// Sorted foreground classes present in `label`.
    pub class_set: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub image: Tensor3,
    /// Labels restricted to `{0} ∪ C^t`.
    pub label: LabelMap,
    /// Original full label, for evaluation only.
    pub full_label: LabelMap,
}

const BASE_COLORS: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.25, 0.30, 0.85],
    [0.85, 0.75, 0.20],
    [0.75, 0.30, 0.75],
    [0.20, 0.75, 0.80],
    [0.90, 0.50, 0.15],
    [0.95, 0.95, 0.95],
];

/// Mean colour of a class.
pub fn class_color(class: ClassId) -> [f64; 3] {
    let i = class as usize - 1;
    if i < BASE_COLORS.len() {
        return BASE_COLORS[i];
    }
    // golden-ratio hue walk for larger vocabularies
    let hue = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Whether offset `(dy, dx)` from a shape centre lies inside the class's
/// primitive of radius `r`.
fn inside_shape(class: ClassId, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match (class as usize - 1) % 8 {
        0 => dy * dy + dx * dx <= r * r,
        1 => ay <= 0.85 * r && ax <= 0.85 * r,
        2 => dy >= -r && dy <= r && ax <= (dy + r) * 0.55,
        3 => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        4 => (ay <= r / 3.0 && ax <= r) || (ax <= r / 3.0 && ay <= r),
        5 => ay + ax <= 1.1 * r,
        6 => ay <= r / 2.2 && ax <= 1.3 * r,
        _ => (dx / (0.6 * r)).powi(2) + (dy / r).powi(2) <= 1.0,
    }
}

/// Generates one scene deterministically from `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let total = (h * w) as f64;
    let short = h.min(w) as f64;
    let jitter = Normal::new(0.0, config.color_jitter.max(1e-12)).expect("valid sigma");
    let noise = Normal::new(0.0, config.noise_sigma.max(1e-12)).expect("valid sigma");

    for _ in 0..config.max_retries.max(1) {
        let n = rng.random_range(config.min_classes..=config.max_classes);
        let mut classes: Vec<ClassId> = sample(&mut rng, config.num_classes, n)
            .into_iter()
            .map(|i| i as ClassId + 1)
            .collect();
        // paint order is the sampled order; ids sorted afterwards for the class set
        let mut label = LabelMap::filled(h, w, BACKGROUND);
        let mut colors = Vec::with_capacity(classes.len());
        for &c in &classes {
            let r = short * rng.random_range(config.min_radius..=config.max_radius);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            for y in 0..h {
                for x in 0..w {
                    if inside_shape(c, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                        label.set(y, x, c);
                    }
                }
            }
            let base = class_color(c);
            colors.push([
                base[0] + jitter.sample(&mut rng),
                base[1] + jitter.sample(&mut rng),
                base[2] + jitter.sample(&mut rng),
            ]);
        }
        let mut counts = vec![0usize; config.num_classes + 1];
        for &v in &label.data {
            counts[v as usize] += 1;
        }
        let ok = classes.iter().all(|&c| {
            let share = counts[c as usize] as f64 / total;
            share >= config.min_share && share <= config.max_share
        });
        if !ok {
            continue;
        }

        let bg_level = rng.random_range(0.25..0.55);
        let tint = [
            rng.random_range(-0.06..0.06),
            rng.random_range(-0.06..0.06),
            rng.random_range(-0.06..0.06),
        ];
        let grad_y = rng.random_range(-0.1..0.1);
        let grad_x = rng.random_range(-0.1..0.1);
        let mut image = Tensor3::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let c = label.get(y, x);
                for ch in 0..3 {
                    let mean = if c == BACKGROUND {
                        bg_level
                            + tint[ch]
                            + grad_y * (y as f64 / h as f64 - 0.5)
                            + grad_x * (x as f64 / w as f64 - 0.5)
                    } else {
                        let k = classes.iter().position(|&k| k == c).expect("painted class");
                        colors[k][ch]
                    };
                    let v = mean + noise.sample(&mut rng);
                    image.set(y, x, ch, v.clamp(0.0, 1.0));
                }
            }
        }
        classes.sort_unstable();
        return Ok(Scene {
            image,
            label,
            class_set: classes,
        });
    }
    Err(Error::Generation(format!(
        "no valid placement for seed {seed} after {} attempts",
        config.max_retries
    )))
}

/// Applies the step-`t` labeling protocol. Returns `None` when the scene is
/// ineligible: it has no pixels of `C^t`, or (disjoint setting) it contains a
/// future-step class.
pub fn relabel_for_step(
    scene: &Scene,
    schedule: &TaskSchedule,
    t: usize,
) -> Result<Option<StepSample>> {
    schedule.check_step(t)?;
    let current = schedule.classes_at(t);
    if !scene.class_set.iter().any(|c| current.contains(c)) {
        return Ok(None);
    }
    if schedule.setting == Setting::Disjoint {
        let future = schedule.future_classes(t);
        if scene.class_set.iter().any(|c| future.contains(c)) {
            return Ok(None);
        }
    }
    let mut label = scene.label.clone();
    for v in label.data.iter_mut() {
        if !current.contains(v) {
            *v = BACKGROUND;
        }
    }
    Ok(Some(StepSample {
        image: scene.image.clone(),
        label,
        full_label: scene.label.clone(),
    }))
}

/// Builds step `t`'s training pool: the first `cap` eligible scenes in corpus order.
pub fn step_pool(
    scenes: &[Scene],
    schedule: &TaskSchedule,
    t: usize,
    cap: usize,
) -> Result<Vec<StepSample>> {
    let mut pool = Vec::new();
    for scene in scenes {
        if pool.len() >= cap {
            break;
        }
        if let Some(s) = relabel_for_step(scene, schedule, t)? {
            pool.push(s);
        }
    }
    Ok(pool)
}

/// Masks classes introduced after step `t` to background; used for evaluation.
pub fn mask_future(label: &LabelMap, schedule: &TaskSchedule, t: usize) -> LabelMap {
    let known = schedule.classes_up_to(t);
    let mut out = label.clone();
    for v in out.data.iter_mut() {
        if *v != BACKGROUND && !known.contains(v) {
            *v = BACKGROUND;
        }
    }
    out
}

/// A seeded collection of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SceneConfig,
    pub seeds: Vec<u64>,
    pub scenes: Vec<Scene>,
}

impl Corpus {
    /// Generates `count` scenes, scene `i` seeded from `(root, stream, i)`.
    /// Generation runs in parallel; ordering is by index.
    pub fn generate(root: u64, stream: Stream, count: usize, config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let seeds: Vec<u64> = (0..count as u64)
            .map(|i| derive_seed(root, stream, &[i]))
            .collect();
        let scenes = seeds
            .par_iter()
            .map(|&s| generate_scene(s, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            seeds,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

const SCENE_MAGIC: &[u8; 4] = b"CSCN";
const SCENE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub class_set: Vec<ClassId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub config: SceneConfig,
    pub scenes: Vec<ManifestEntry>,
}

fn scene_id(i: usize) -> String {
    format!("scene_{i:05}")
}

fn encode_scene(scene: &Scene) -> Vec<u8> {
    let (h, w) = (scene.label.h, scene.label.w);
    let mut buf = Vec::with_capacity(16 + h * w * 26);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in &scene.image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &scene.label.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_scene(path: &Path, bytes: &[u8]) -> Result<Scene> {
    let bad = |why: &str| Error::load(path, why.to_string());
    if bytes.len() < 16 || &bytes[..4] != SCENE_MAGIC {
        return Err(bad("not a scene file"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if word(4) as u32 != SCENE_VERSION {
        return Err(bad("unsupported scene version"));
    }
    let (h, w) = (word(8), word(12));
    let n = h * w;
    if bytes.len() != 16 + n * 3 * 8 + n * 2 {
        return Err(bad("truncated scene file"));
    }
    let mut off = 16;
    let mut img = Vec::with_capacity(n * 3);
    for _ in 0..n * 3 {
        img.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        off += 8;
    }
    let mut lab = Vec::with_capacity(n);
    for _ in 0..n {
        lab.push(ClassId::from_le_bytes(
            bytes[off..off + 2].try_into().unwrap(),
        ));
        off += 2;
    }
    let label = LabelMap::from_vec(h, w, lab)?;
    let class_set = label.foreground_classes();
    Ok(Scene {
        image: Tensor3::from_vec(h, w, 3, img)?,
        label,
        class_set,
    })
}

/// Writes one binary file per scene plus `manifest.json`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, (seed, scene)) in corpus.seeds.iter().zip(&corpus.scenes).enumerate() {
        let id = scene_id(i);
        let path = dir.join(format!("{id}.bin"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&encode_scene(scene))
            .map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id,
            seed: *seed,
            class_set: scene.class_set.clone(),
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        config: corpus.config.clone(),
        scenes: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::load(&path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::load(
            &path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

/// Loads the stored scene tensors named by the manifest.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let path = dir.join(format!("{}.bin", entry.id));
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let scene = decode_scene(&path, &bytes)?;
        if scene.class_set != entry.class_set {
            return Err(Error::load(&path, "class set disagrees with manifest"));
        }
        scenes.push(scene);
    }
    Ok(Corpus {
        config: manifest.config,
        seeds: manifest.scenes.iter().map(|e| e.seed).collect(),
        scenes,
    })
}

/// Regenerates every scene from the manifest's seeds and config alone.
pub fn regenerate_from_manifest(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    let seeds: Vec<u64> = manifest.scenes.iter().map(|e| e.seed).collect();
    let scenes = seeds
        .par_iter()
        .map(|&s| generate_scene(s, &manifest.config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: manifest.config,
        seeds,
        scenes,
    })
}
