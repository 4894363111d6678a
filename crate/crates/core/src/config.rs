//! Run configuration: a flat, versioned TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{LEVEL_STRIDES, NUM_LEVELS};
use crate::data::GenParams;
use crate::error::{Error, Result};
use crate::fusion;
use crate::gcn::SoftmaxAxis;
use crate::graph::DownsampleConfig;
use crate::loss::LossWeights;
use crate::model::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `α · L_C + (1 − α) · L_B`; needs the graph branch.
    Composite,
    /// Final-prediction Dice loss only.
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,

    pub fusion: String,
    pub loss: LossMode,
    /// Enabled graph levels, 1-based.
    pub levels: Vec<usize>,
    pub downsample: Vec<usize>,
    pub sigma: f64,
    pub alpha: f64,
    pub transform_stride: usize,
    pub softmax_axis: SoftmaxAxis,

    pub lr: f64,
    /// Fractional decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,

    pub image_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub min_mask_frac: f64,
    pub max_mask_frac: f64,
    pub augment: bool,
    pub seed: u64,

    /// Warm passes over the test set when timing inference.
    pub speed_passes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            fusion: "concat".into(),
            loss: LossMode::Composite,
            levels: vec![1, 2, 3, 4],
            downsample: vec![8, 4, 2, 1],
            sigma: 1.0,
            alpha: 0.5,
            transform_stride: 2,
            softmax_axis: SoftmaxAxis::Channel,
            lr: 1e-4,
            lr_decay: 0.06,
            decay_every: 2,
            epochs: 30,
            batch_size: 16,
            image_size: 64,
            train_samples: 500,
            test_samples: 100,
            min_mask_frac: 0.02,
            max_mask_frac: 0.25,
            augment: true,
            seed: 0,
            speed_passes: 3,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.config_version != CONFIG_VERSION {
            return fail(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if !fusion::builtin().contains(&self.fusion) {
            return fail(format!(
                "unknown fusion mode `{}` (known: {})",
                self.fusion,
                fusion::builtin().names().join(", ")
            ));
        }
        let mut seen = [false; NUM_LEVELS];
        for &l in &self.levels {
            if !(1..=NUM_LEVELS).contains(&l) || seen[l - 1] {
                return fail(format!("levels must be distinct values in 1..={NUM_LEVELS}, got {:?}", self.levels));
            }
            seen[l - 1] = true;
        }
        if self.loss == LossMode::Composite && self.levels.is_empty() {
            return fail("composite loss needs at least one graph level".into());
        }
        self.downsample_config()?;
        LossWeights::new(self.alpha)?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(1..=2).contains(&self.transform_stride) {
            return fail(format!("transform_stride must be 1 or 2, got {}", self.transform_stride));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return fail(format!("lr_decay must lie in [0, 1), got {}", self.lr_decay));
        }
        for (name, v) in [
            ("decay_every", self.decay_every),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("speed_passes", self.speed_passes),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        self.gen_params().validate()?;
        let ds = self.downsample_config()?;
        for (i, &stride) in LEVEL_STRIDES.iter().enumerate() {
            let side = self.image_size / stride;
            if side % ds.factor(i) != 0 {
                return fail(format!(
                    "level {} is {side}x{side} at image size {}, not divisible by factor {}",
                    i + 1,
                    self.image_size,
                    ds.factor(i)
                ));
            }
        }
        Ok(())
    }

    pub fn downsample_config(&self) -> Result<DownsampleConfig> {
        let factors: [usize; NUM_LEVELS] = self.downsample.as_slice().try_into().map_err(|_| {
            Error::Config(format!("downsample needs {NUM_LEVELS} factors, got {:?}", self.downsample))
        })?;
        DownsampleConfig::new(factors)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut levels = [false; NUM_LEVELS];
        for &l in &self.levels {
            levels[l - 1] = true;
        }
        Ok(ModelConfig {
            fusion: self.fusion.clone(),
            levels,
            downsample: self.downsample_config()?,
            sigma: self.sigma,
            transform_stride: self.transform_stride,
            softmax_axis: self.softmax_axis,
        })
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            size: self.image_size,
            min_frac: self.min_mask_frac,
            max_frac: self.max_mask_frac,
        }
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * (1.0 - self.lr_decay).powi((epoch / self.decay_every) as i32)
    }

    /// First sample seed of the training set. Train and test seeds occupy
    /// disjoint ranges for every run seed.
    pub fn train_seed_base(&self) -> u64 {
        self.seed.wrapping_mul(1 << 32)
    }

    pub fn test_seed_base(&self) -> u64 {
        self.train_seed_base() + (1 << 31)
    }
}
