//! Run configuration: TOML schema, defaults, canonical form and hash.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! input_dim = 784
//! hidden = [128, 128]
//! classes = 10
//!
//! [data]
//! source = "synthetic"
//!
//! [attack]
//! kind = "fgsm"
//! epsilon = 0.3
//!
//! [regularizer]
//! kind = "elle"
//! lambda = 100.0
//!
//! [schedule]
//! kind = "short"
//! lr = 0.2
//! epochs = 20
//!
//! [eval]
//! every = 1
//! ```
//!
//! Every section except `model` may be omitted; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackSpec;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::regularizers::RegularizerSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "AttackSpec::none")]
    pub attack: AttackSpec,
    #[serde(default)]
    pub regularizer: RegularizerSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Strokes,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "default_source")]
    pub source: DataSource,
    /// Synthetic input dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Blobs per class for synthetic data.
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Maximum stroke translation in pixels.
    #[serde(default = "default_shift")]
    pub shift: usize,
    /// IDX image file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Use a seeded subset of this many IDX rows before splitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    /// Rows held out for evaluation and probes.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_source() -> DataSource {
    DataSource::Synthetic
}
fn default_dim() -> usize {
    784
}
fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    500
}
fn default_margin() -> f64 {
    0.8
}
fn default_spread() -> f64 {
    0.4
}
fn default_modes() -> usize {
    1
}
fn default_shift() -> usize {
    2
}
fn default_test_size() -> usize {
    1000
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: default_source(),
            dim: default_dim(),
            classes: default_classes(),
            per_class: default_per_class(),
            margin: default_margin(),
            spread: default_spread(),
            modes: default_modes(),
            shift: default_shift(),
            images: None,
            labels: None,
            subset: None,
            test_size: default_test_size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Triangular 0 → lr → 0 peaking halfway.
    Short,
    /// Piecewise constant lr, lr/10, lr/100.
    Long,
    /// Cosine decay from lr to 0.
    LongCos,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_schedule_kind")]
    pub kind: ScheduleKind,
    /// Peak (short) or initial (long, long_cos, constant) learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Decay epochs of the long schedule; defaults to `[T/2, 3T/4]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub milestones: Option<[usize; 2]>,
}

fn default_schedule_kind() -> ScheduleKind {
    ScheduleKind::Short
}
fn default_lr() -> f64 {
    0.2
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    128
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: default_schedule_kind(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            milestones: None,
        }
    }
}

impl ScheduleSpec {
    pub fn milestones(&self) -> [usize; 2] {
        self.milestones
            .unwrap_or([self.epochs / 2, self.epochs * 3 / 4])
    }

    /// Learning rate at `step` of `epoch`, interpolated within the epoch.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let t = self.epochs as f64;
        let progress = (epoch as f64 + step as f64 / steps_per_epoch.max(1) as f64) / t;
        match self.kind {
            ScheduleKind::Short => {
                if progress <= 0.5 {
                    self.lr * progress / 0.5
                } else {
                    self.lr * ((1.0 - progress) / 0.5).max(0.0)
                }
            }
            ScheduleKind::Long => {
                let [m1, m2] = self.milestones();
                if epoch < m1 {
                    self.lr
                } else if epoch < m2 {
                    self.lr / 10.0
                } else {
                    self.lr / 100.0
                }
            }
            ScheduleKind::LongCos => {
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            ScheduleKind::Constant => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoDetectorConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_spike")]
    pub spike: f64,
    /// Relative drop of robust accuracy from its best value.
    #[serde(default = "default_drop")]
    pub drop: f64,
}

fn default_window() -> usize {
    5
}
fn default_spike() -> f64 {
    10.0
}
fn default_drop() -> f64 {
    0.5
}

impl Default for CoDetectorConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            spike: default_spike(),
            drop: default_drop(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Defaults to PGD-10 at the training ε.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    /// Evaluate and probe every this many epochs; 0 disables.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Held-out rows used for accuracy; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_size: Option<usize>,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default)]
    pub co: CoDetectorConfig,
    /// Include wall-clock fields in the metrics log. Off by default so logs
    /// are reproducible byte for byte.
    #[serde(default)]
    pub log_timings: bool,
}

fn default_every() -> usize {
    1
}
fn default_probe_size() -> usize {
    1024
}
fn default_probe_samples() -> usize {
    1
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            attack: None,
            every: default_every(),
            eval_size: None,
            probe_size: default_probe_size(),
            probe_samples: default_probe_samples(),
            co: CoDetectorConfig::default(),
            log_timings: false,
        }
    }
}

impl RunConfig {
    /// The attack used for robust accuracy.
    pub fn eval_attack(&self) -> AttackSpec {
        self.eval
            .attack
            .clone()
            .unwrap_or_else(|| AttackSpec::pgd(self.attack.epsilon, 10, 1))
    }

    /// The ε shared by the attack and the regularizers.
    pub fn epsilon(&self) -> f64 {
        self.attack.epsilon
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed {} does not fit in a TOML integer",
                self.seed
            )));
        }
        self.model.validate()?;
        self.attack.validate()?;
        self.regularizer.validate()?;
        self.eval_attack().validate()?;
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be >= 1".into()));
        }
        if s.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::Config("schedule.momentum must lie in [0, 1)".into()));
        }
        if !(s.weight_decay >= 0.0) {
            return Err(Error::Config("schedule.weight_decay must be >= 0".into()));
        }
        if !(s.lr >= 0.0) {
            return Err(Error::Config("schedule.lr must be >= 0".into()));
        }
        let co = &self.eval.co;
        if co.window < 2 || !(co.spike > 0.0) || !(co.drop > 0.0 && co.drop <= 1.0) {
            return Err(Error::Config(
                "eval.co needs window >= 2, spike > 0, drop in (0, 1]".into(),
            ));
        }
        if self.eval.probe_samples == 0 {
            return Err(Error::Config("eval.probe_samples must be >= 1".into()));
        }
        if self.data.source != DataSource::Idx && self.data.dim != self.model.input_dim {
            return Err(Error::Config(format!(
                "data.dim = {} but model.input_dim = {}",
                self.data.dim, self.model.input_dim
            )));
        }
        if self.data.source != DataSource::Idx && self.data.classes != self.model.classes {
            return Err(Error::Config(format!(
                "data.classes = {} but model.classes = {}",
                self.data.classes, self.model.classes
            )));
        }
        if self.data.source == DataSource::Idx
            && (self.data.images.is_none() || self.data.labels.is_none())
        {
            return Err(Error::Config(
                "data.source = \"idx\" needs data.images and data.labels".into(),
            ));
        }
        Ok(())
    }

    /// Parses and validates; errors name the offending key path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!("at `{path}`: {}", inner.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// TOML with every default written out.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
