//! Run configuration file (TOML). Every table and key is optional; unknown
//! keys are rejected.
//!
//! ```toml
//! out = "out"
//!
//! [dataset]
//! root = "data/scene"
//! dilation_radius = 8
//! halo_width = 16
//! guidance_resolution = 64
//!
//! [field]                     # hash grid + MLP
//! levels = 16
//! features_per_level = 2
//! table_size_log2 = 19
//! base_resolution = 16
//! level_scale = 1.3819
//! mlp_hidden = 64
//! mlp_layers = 3
//! bounds_min = [-1.0, -1.0, -1.0]
//! bounds_max = [1.0, 1.0, 1.0]
//!
//! [train]
//! steps = 20000
//! learning_rate = 1e-3
//! hash_lr_multiplier = 10.0
//! cfg_scale_erase = 7.5
//! cfg_scale_replace = 30.0
//! background_augmentation = true
//! bg_swap_interval = 3
//! seed = 0
//! lambda_rgb = 0.1
//! weighting = "constant"      # or "noise_variance"
//! reduction = "sum"           # or "mean"
//! crop_mode = "center_height" # "left_most", "mask_adaptive"
//! checkpoint_every = 0
//! sampling = { coarse_samples = 128, fine_samples = 128, jitter = true }
//! weights = { lambda_recon = 3.0, lambda_vgg = 0.03, lambda_depth = 3.0 }
//! schedule = { t_min = 0.2, t_max = 0.98 }
//! adam = { beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
//!
//! [guidance]
//! provider = "oracle"         # or "external:<program> [args...]"
//! latent_factor = 1           # oracle codec downsampling
//!
//! [objectives]
//! depth = "auto"              # "oracle", "luminance"
//! perceptual_seed = 7
//!
//! [metrics]
//! dim = 64
//! grid = 8
//! seed = 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::scene::DatasetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub provider: String,
    pub latent_factor: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            provider: "oracle".into(),
            latent_factor: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// Oracle depth maps if the dataset ships them, otherwise luminance.
    Auto,
    Oracle,
    Luminance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectivesConfig {
    pub depth: DepthSource,
    pub perceptual_seed: u64,
}

impl Default for ObjectivesConfig {
    fn default() -> Self {
        Self {
            depth: DepthSource::Auto,
            perceptual_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub dim: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            grid: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub objectives: ObjectivesConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            field: FieldConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            objectives: ObjectivesConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Which guidance provider to build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Oracle,
    External { program: PathBuf, args: Vec<String> },
}

impl ProviderSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "oracle" {
            return Ok(ProviderSpec::Oracle);
        }
        if let Some(cmd) = text.strip_prefix("external:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("external provider needs a program".into()))?;
            return Ok(ProviderSpec::External {
                program: PathBuf::from(program),
                args: parts.map(str::to_string).collect(),
            });
        }
        Err(Error::Config(format!(
            "unknown provider {text:?} (expected \"oracle\" or \"external:<program> [args]\")"
        )))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative dataset roots are relative to the config file
        if config.dataset.root.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset.root = dir.join(&config.dataset.root);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.train.validate()?;
        ProviderSpec::parse(&self.guidance.provider)?;
        if self.guidance.latent_factor == 0 {
            return Err(Error::Config("guidance.latent_factor must be at least 1".into()));
        }
        if self.metrics.dim == 0 || self.metrics.grid == 0 {
            return Err(Error::Config("metrics.dim and metrics.grid must be positive".into()));
        }
        Ok(())
    }
}
