use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GeneratorConfig, PixelLoss};
use crate::sensitivity::{DEFAULT_BACKWARD_BUDGET, DEFAULT_MEDIAN_MULTIPLE};
use crate::tensor::Precision;

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Validations without a new best PSNR before the learning rate decays.
    pub patience: usize,
    pub lr_decay: f64,
    /// Training stops once the learning rate has decayed to this value.
    pub min_lr: f64,
    pub max_epochs: usize,
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub precision: Precision,
    pub loss: PixelLoss,
    /// HR side length of training crops.
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Random flips and quarter turns of training crops.
    pub augment: bool,
    /// Evaluation budget of each adjoint backward solve.
    pub backward_budget: usize,
    pub watchdog_multiple: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 16,
            patience: 3,
            lr_decay: 0.5,
            min_lr: 1e-6,
            max_epochs: 100,
            generator: GeneratorConfig::default(),
            seed: 0,
            precision: Precision::F32,
            loss: PixelLoss::L1,
            patch_size: 128,
            patches_per_image: 16,
            augment: true,
            backward_budget: DEFAULT_BACKWARD_BUDGET,
            watchdog_multiple: DEFAULT_MEDIAN_MULTIPLE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.min_lr >= 0.0 && self.min_lr < self.learning_rate) {
            return fail(format!(
                "min_lr {} must be below learning_rate {}",
                self.min_lr, self.learning_rate
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail(format!("lr_decay {} must lie in (0, 1)", self.lr_decay));
        }
        if self.patience == 0 || self.batch_size == 0 || self.patches_per_image == 0 {
            return fail("patience, batch_size and patches_per_image must be at least 1".into());
        }
        if self.backward_budget == 0 || !(self.watchdog_multiple > 1.0) {
            return fail("backward_budget must be positive and watchdog_multiple above 1".into());
        }
        let s = self.generator.scale;
        if self.patch_size == 0 || s == 0 || !self.patch_size.is_multiple_of(s) {
            return fail(format!(
                "patch_size {} must be a positive multiple of scale {s}",
                self.patch_size
            ));
        }
        self.generator.validate()
    }

    /// Read a JSON run configuration; omitted fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// Validation-driven learning-rate decay with a floor.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: Option<f64>,
    stale: usize,
    patience: usize,
    decay: f64,
    min_lr: f64,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            best: None,
            stale: 0,
            patience: cfg.patience,
            decay: cfg.lr_decay,
            min_lr: cfg.min_lr,
        }
    }

    /// Record a validation PSNR; returns `true` once training should stop.
    pub fn observe(&mut self, psnr: f64) -> bool {
        if self.best.is_none_or(|b| psnr > b) {
            self.best = Some(psnr);
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return false;
        }
        self.stale = 0;
        self.lr *= self.decay;
        if self.lr <= self.min_lr {
            self.lr = self.min_lr;
            return true;
        }
        false
    }

    pub fn improved(&self, psnr: f64) -> bool {
        self.best.is_none_or(|b| psnr > b)
    }
}
