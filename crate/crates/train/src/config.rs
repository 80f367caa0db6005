//! Training hyperparameters and the combined run configuration file.

use std::path::Path;

use epmvg_core::kv::{format_f64, parse_value, KvConfig, KvFile};
use epmvg_core::losses::{DistillKind, DistillMode, LossWeights, Modality};
use epmvg_core::model::ModelConfig;
use epmvg_core::{Error, Result};

use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Zero-based epoch from which both learning rates are multiplied by 0.1.
    pub lr_drop_epoch: usize,
    pub base_lr: f64,
    pub pretrained_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub distill: DistillMode,
    pub teacher_frozen: bool,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_drop_epoch: 20,
            base_lr: 1e-4,
            pretrained_lr: 1e-5,
            weight_decay: 1e-4,
            batch_size: 16,
            weights: LossWeights::default(),
            seed: 0,
            distill: DistillMode::default(),
            teacher_frozen: true,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lr_drop_epoch == 0 || self.lr_drop_epoch > self.epochs {
            return Err(Error::Config(format!(
                "lr_drop_epoch must lie in 1..={}, got {}",
                self.epochs, self.lr_drop_epoch
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (k, v) in [
            ("base_lr", self.base_lr),
            ("pretrained_lr", self.pretrained_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{k} must be finite and non-negative, got {v}")));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("AdamW needs 0 <= beta < 1 and eps > 0".into()));
        }
        self.weights.validate()
    }

    /// Multiplier applied to both learning rates in `epoch` (zero-based).
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            0.1
        } else {
            1.0
        }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr_drop_epoch" => self.lr_drop_epoch = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "pretrained_lr" => self.pretrained_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "alpha" => self.weights.alpha = parse_value(key, value)?,
            "beta" => self.weights.beta = parse_value(key, value)?,
            "lambda" => self.weights.lambda = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "distill_mode" => self.distill.modality = value.parse::<Modality>()?,
            "distill_loss" => self.distill.kind = value.parse::<DistillKind>()?,
            "teacher_frozen" => self.teacher_frozen = parse_value(key, value)?,
            _ => return self.adam.set(key, value),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = [
            ("epochs", self.epochs.to_string()),
            ("lr_drop_epoch", self.lr_drop_epoch.to_string()),
            ("base_lr", format_f64(self.base_lr)),
            ("pretrained_lr", format_f64(self.pretrained_lr)),
            ("weight_decay", format_f64(self.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("alpha", format_f64(self.weights.alpha)),
            ("beta", format_f64(self.weights.beta)),
            ("lambda", format_f64(self.weights.lambda)),
            ("seed", self.seed.to_string()),
            ("distill_mode", self.distill.modality.to_string()),
            ("distill_loss", self.distill.kind.to_string()),
            ("teacher_frozen", self.teacher_frozen.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(self.adam.pairs());
        out
    }
}

/// Model and training settings read from one `key = value` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let file = KvFile::read(path)?;
        for (k, v, line) in &file.entries {
            if !cfg.set(k, v)? {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("unknown configuration key {k:?}"),
                });
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

impl KvConfig for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.model.set(key, value)? {
            return Ok(true);
        }
        self.train.set(key, value)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.pairs();
        out.extend(self.train.pairs());
        out
    }
}
