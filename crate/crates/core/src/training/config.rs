//! Run configuration, read from a flat TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::PrAveraging;
use crate::loss::{LossWeights, Reduction};
use crate::models::{Arch, ModelSpec, Task};
use crate::preprocess::{default_sigma, AugmentationPolicy, EnhanceOrder, PreprocessConfig};
use crate::training::adam::AdamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Every tunable of a run. Defaults reproduce the published protocol at
/// full 576 x 576 resolution; [`RunConfig::desk`] is a laptop-sized preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    /// Target of single-decoder networks.
    pub task: Task,
    pub input_size: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub omega: f64,
    pub lambda_od: f64,
    pub lambda_ex: f64,
    /// Replace the fixed lambdas by the background fraction of each batch.
    pub auto_balance: bool,
    /// Weight of the complemented-label term on each head's background channel.
    pub background_weight: f64,
    pub reduction: Reduction,
    pub precision: Precision,
    pub seed: u64,
    pub fold_count: usize,
    /// Evaluate held-out F1 every this many epochs (and after the last).
    pub eval_every: usize,
    pub threshold: f64,
    pub sigma: f64,
    pub pr_averaging: PrAveraging,

    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub normalization: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Recompute normalisation statistics over the training set, without
    /// dropout, before every evaluation and at the end of training.
    pub recalibrate_norm: bool,

    pub enhance: bool,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub enhance_order: EnhanceOrder,

    pub augment: bool,
    pub rotate: bool,
    pub angle_min: f64,
    pub angle_max: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub per_pixel_intensity: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let aug = AugmentationPolicy::default();
        RunConfig {
            arch: Arch::Wnet,
            task: Task::Ex,
            input_size: 576,
            base_channels: 32,
            epochs: 1000,
            batch_size: 2,
            lr: 0.0005,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            omega: w.omega,
            lambda_od: w.lambda_od,
            lambda_ex: w.lambda_ex,
            auto_balance: false,
            background_weight: 1.0,
            reduction: Reduction::ImageSum,
            precision: Precision::F32,
            seed: 0,
            fold_count: 5,
            eval_every: 1,
            threshold: 0.5,
            sigma: 0.2,
            pr_averaging: PrAveraging::Vertical,
            leaky_slope: 0.01,
            dropout_rate: 0.2,
            normalization: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            recalibrate_norm: true,
            enhance: true,
            blur_kernel: 9,
            blur_sigma: default_sigma(9),
            enhance_order: EnhanceOrder::ResizeFirst,
            augment: true,
            rotate: aug.rotate,
            angle_min: aug.angle_range.0,
            angle_max: aug.angle_range.1,
            hflip: aug.hflip,
            vflip: aug.vflip,
            intensity_min: aug.intensity_factor_range.0,
            intensity_max: aug.intensity_factor_range.1,
            per_pixel_intensity: aug.per_pixel_intensity,
        }
    }
}

impl RunConfig {
    /// 64 x 64 inputs, 200 epochs.
    pub fn desk() -> Self {
        RunConfig {
            input_size: 64,
            epochs: 200,
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("fold_count", self.fold_count),
            ("eval_every", self.eval_every),
            ("base_channels", self.base_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("lr and adam_eps must be positive".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1)")));
            }
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if self.background_weight < 0.0 {
            return Err(Error::Config("background_weight must be non-negative".into()));
        }
        if self.blur_kernel % 2 == 0 || self.blur_sigma <= 0.0 {
            return Err(Error::Config("blur_kernel must be odd and blur_sigma positive".into()));
        }
        self.model_spec().validate()?;
        self.augmentation_policy().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            arch: self.arch,
            input_size: self.input_size,
            in_channels: 3,
            base_channels: self.base_channels,
            leaky_slope: self.leaky_slope,
            dropout_rate: self.dropout_rate,
            normalization: self.normalization,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            single_task: self.task,
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            input_size: self.input_size,
            enhance: self.enhance,
            blur_kernel: self.blur_kernel,
            blur_sigma: self.blur_sigma,
            order: self.enhance_order,
        }
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            rotate: self.rotate,
            angle_range: (self.angle_min, self.angle_max),
            hflip: self.hflip,
            vflip: self.vflip,
            intensity_factor_range: (self.intensity_min, self.intensity_max),
            per_pixel_intensity: self.per_pixel_intensity,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            omega: self.omega,
            lambda_od: self.lambda_od,
            lambda_ex: self.lambda_ex,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}
