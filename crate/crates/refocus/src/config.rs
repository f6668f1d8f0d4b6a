//! Service configuration: one TOML file plus `REFOCUS_*` environment
//! overrides for the port, data directory and device.

use std::path::{Path, PathBuf};

use refocus_core::annotation::DEFAULT_ACCEPT_THRESHOLD;
use refocus_core::nn::BackboneKind;
use refocus_core::ranking::{DEFAULT_DEPENDENCY_THRESHOLD, DEFAULT_TOP_FRACTION};
use refocus_core::train::TrainingParams;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
}

impl std::str::FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(Self::Cpu),
            other => Err(Error::Config(format!("device `{other}` is not supported; only `cpu` is available"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub port: u16,
    pub data_dir: PathBuf,
    pub device: Device,
    pub image_size: usize,
    pub backbone: BackboneKind,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
    pub training: TrainingParams,
    pub finetune: TrainingParams,
    /// λ0 of the dynamic attention weights.
    pub base_weight: f64,
    pub replay_fraction: f64,
    /// Heatmap threshold when an expert accepts a heatmap as an annotation.
    pub accept_threshold: f64,
    pub top_fraction: f64,
    pub dependency_threshold: u64,
    pub prediction_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            port: 8080,
            data_dir: PathBuf::from("refocus-data"),
            device: Device::Cpu,
            image_size: 224,
            backbone: BackboneKind::SmallCnn,
            split_ratios: (0.8, 0.1, 0.1),
            split_seed: 0,
            training: TrainingParams::default(),
            finetune: TrainingParams::default(),
            base_weight: 1.0,
            replay_fraction: 0.5,
            accept_threshold: DEFAULT_ACCEPT_THRESHOLD,
            top_fraction: DEFAULT_TOP_FRACTION,
            dependency_threshold: DEFAULT_DEPENDENCY_THRESHOLD,
            prediction_threshold: 0.5,
        }
    }
}

impl Config {
    /// Reads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `REFOCUS_PORT`, `REFOCUS_DATA_DIR` and `REFOCUS_DEVICE`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = get("REFOCUS_PORT") {
            self.port = v
                .parse()
                .map_err(|_| Error::Config(format!("REFOCUS_PORT `{v}` is not a port number")))?;
        }
        if let Some(v) = get("REFOCUS_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get("REFOCUS_DEVICE") {
            self.device = v.parse()?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        self.training.validate()?;
        self.finetune.validate()?;
        if !(self.base_weight > 0.0 && self.base_weight.is_finite()) {
            return Err(Error::Config("base_weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::Config("replay_fraction must lie in [0, 1]".into()));
        }
        if !(self.accept_threshold > 0.0 && self.accept_threshold <= 1.0) {
            return Err(Error::Config("accept_threshold must lie in (0, 1]".into()));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction < 1.0) {
            return Err(Error::Config("top_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
