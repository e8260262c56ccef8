use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_synth::{build_schedule, SceneConfig, Setting, TaskSchedule};
use crate::error::{Error, Result};
use crate::losses::{CpdAverage, ReplayTargets};
use crate::segmodel::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain mBCE on the step labels.
    Finetune,
    /// Pseudo-labels, distillation and replay from fixed prototypes.
    FixedReplay,
    /// Fixed replay plus the components switched on by `adc`, `uac`, `cpd`.
    Adapter,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Finetune, Method::FixedReplay, Method::Adapter];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::FixedReplay => "fixed_replay",
            Method::Adapter => "adapter",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "fixed_replay" => Ok(Method::FixedReplay),
            "adapter" => Ok(Method::Adapter),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

/// Everything that defines one experiment. Unknown JSON keys are rejected;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub init_count: usize,
    pub inc_count: usize,
    pub setting: Setting,

    pub scene: SceneConfig,
    pub model: ModelConfig,
    /// Scenes generated for the training corpus.
    pub train_corpus: usize,
    /// Maximum eligible scenes per step pool.
    pub pool_size: usize,
    /// Evaluation scenes per step.
    pub eval_per_step: usize,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub epsilon: f64,

    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Replayed features per old class per batch.
    pub replay_count: usize,
    /// First epoch (1-based) after which drift compensation runs.
    pub warm_epochs: usize,
    pub seed: u64,

    pub method: Method,
    pub adc: bool,
    pub uac: bool,
    pub cpd: bool,
    /// Prototype-repulsion half of CPD.
    pub cpd_new_old: bool,
    /// Positive/negative centre half of CPD.
    pub cpd_pos_neg: bool,
    pub cpd_average: CpdAverage,
    pub renormalize_compensated: bool,
    pub replay_targets: ReplayTargets,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            init_count: 2,
            inc_count: 2,
            setting: Setting::Overlapped,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train_corpus: 600,
            pool_size: 200,
            eval_per_step: 50,
            alpha: 5.0,
            beta: 0.1,
            gamma: 0.05,
            tau: 0.7,
            epsilon: 1e-2,
            epochs: 20,
            lr_initial: 0.1,
            lr_incremental: 0.1,
            momentum: 0.9,
            grad_clip: 1.0,
            batch_size: 16,
            replay_count: 32,
            warm_epochs: 2,
            seed: 0,
            method: Method::Adapter,
            adc: true,
            uac: true,
            cpd: true,
            cpd_new_old: true,
            cpd_pos_neg: true,
            cpd_average: CpdAverage::PresentClasses,
            renormalize_compensated: true,
            replay_targets: ReplayTargets::default(),
        }
    }
}

/// Components actually active for a config, after applying the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveParts {
    pub pseudo_label: bool,
    pub kd: bool,
    pub replay: bool,
    pub adc: bool,
    pub uac: bool,
    pub cpd: bool,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        build_schedule(
            self.num_classes,
            self.init_count,
            self.inc_count,
            self.setting,
        )?;
        self.scene.validate()?;
        self.model.validate()?;
        if self.scene.num_classes != self.num_classes {
            return Err(Error::config("scene.num_classes", "must equal num_classes"));
        }
        if self.scene.height != self.model.height || self.scene.width != self.model.width {
            return Err(Error::config(
                "model.height",
                "model and scene image sizes differ",
            ));
        }
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_incremental > 0.0) {
            return Err(Error::config(
                "lr_initial",
                "learning rates must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.pool_size == 0 || self.train_corpus == 0 || self.eval_per_step == 0 {
            return Err(Error::config("pool_size", "corpus sizes must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> TaskSchedule {
        build_schedule(
            self.num_classes,
            self.init_count,
            self.inc_count,
            self.setting,
        )
        .expect("validated config")
    }

    pub fn active(&self) -> ActiveParts {
        match self.method {
            Method::Finetune => ActiveParts {
                pseudo_label: false,
                kd: false,
                replay: false,
                adc: false,
                uac: false,
                cpd: false,
            },
            Method::FixedReplay => ActiveParts {
                pseudo_label: true,
                kd: true,
                replay: true,
                adc: false,
                uac: false,
                cpd: false,
            },
            Method::Adapter => ActiveParts {
                pseudo_label: true,
                kd: true,
                replay: true,
                adc: self.adc,
                uac: self.uac,
                cpd: self.cpd,
            },
        }
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}
