//! Experiment specification files.
//!
//! ```toml
//! name = "k32-d8"
//! seed = 7
//! epochs = 200
//! codebook_size = 32
//! latent_dim = 8
//! image_count = 16
//!
//! [model]
//! image_size = 32
//! base_channels = 8
//!
//! [run]
//! output_dir = "runs"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Network shape apart from the grid axes (`codebook_size`, `latent_dim`,
/// `use_positional_encoding`, `small_network`), which live at the top level
/// of [`ExperimentSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_downsamples: usize,
    pub attn_at_resolutions: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        let m = ModelConfig::desk();
        Self {
            image_size: m.image_size,
            in_channels: m.in_channels,
            base_channels: m.base_channels,
            channel_multipliers: m.channel_multipliers,
            num_downsamples: m.num_downsamples,
            attn_at_resolutions: m.attn_at_resolutions,
            dropout_rate: m.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer eps must be > 0"));
        }
        Ok(())
    }
}

/// Where data comes from and where artifacts go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Image directory; synthetic coloured discs are generated when unset.
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub split_fraction: f64,
    /// Write a reconstruction grid every this many epochs (0 disables).
    pub recon_every: usize,
    /// Width of the discriminator's first layer.
    pub disc_channels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            output_dir: PathBuf::from("runs"),
            batch_size: 5,
            split_fraction: 0.9,
            recon_every: 0,
            disc_channels: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub image_count: usize,
    #[serde(default)]
    pub use_positional_encoding: bool,
    #[serde(default)]
    pub small_network: bool,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub run: RunConfig,
}

/// Train and validation counts for `n` images: `floor(n * fraction)` train.
pub fn split_counts(n: usize, fraction: f64) -> (usize, usize) {
    let train = ((n as f64) * fraction).floor() as usize;
    let train = train.min(n);
    (train, n - train)
}

impl ExperimentSpec {
    /// The desk-scale toy run: 16 synthetic 32x32 images, K=32, D=8.
    pub fn toy(name: &str, seed: u64, epochs: usize) -> Self {
        Self {
            name: name.to_string(),
            seed,
            epochs,
            codebook_size: 32,
            latent_dim: 8,
            image_count: 16,
            use_positional_encoding: false,
            small_network: false,
            model: Architecture {
                base_channels: 8,
                ..Architecture::default()
            },
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            run: RunConfig::default(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let a = &self.model;
        ModelConfig {
            image_size: a.image_size,
            in_channels: a.in_channels,
            base_channels: a.base_channels,
            channel_multipliers: a.channel_multipliers.clone(),
            num_downsamples: a.num_downsamples,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            use_positional_encoding: self.use_positional_encoding,
            attn_at_resolutions: a.attn_at_resolutions.clone(),
            dropout_rate: a.dropout_rate,
            small_network: self.small_network,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.name.starts_with('.')
        {
            return Err(Error::config(format!(
                "experiment name {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.name
            )));
        }
        self.model_config().validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.run.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.run.split_fraction > 0.0 && self.run.split_fraction < 1.0) {
            return Err(Error::config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.run.split_fraction
            )));
        }
        let (train, val) = split_counts(self.image_count, self.run.split_fraction);
        if train == 0 || val == 0 {
            return Err(Error::config(format!(
                "image_count {} with split {} leaves an empty split ({train} train / {val} val)",
                self.image_count, self.run.split_fraction
            )));
        }
        if self.run.disc_channels == 0 {
            return Err(Error::config("disc_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Directory holding this run's artifacts.
    pub fn run_dir(&self) -> PathBuf {
        self.run.output_dir.join(&self.name)
    }
}
