//! Strict JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::net::BaseNetworkSpec;
use crate::train::TrainConfig;

pub const DATA_DIR_ENV: &str = "HFRES_DATA_DIR";

fn default_arch() -> String {
    "mini-resnet".into()
}
fn default_alpha() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_dataset() -> String {
    "cifar10".into()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolutions {
    pub low: usize,
    pub high: usize,
}

impl Default for Resolutions {
    fn default() -> Self {
        Resolutions { low: 16, high: 32 }
    }
}

/// Optional caps on the number of samples read from each split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub eval: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default)]
    pub limits: Limits,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            dataset: default_dataset(),
            limits: Limits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub resolutions: Resolutions,
    #[serde(default = "default_true")]
    pub fuse_stem: bool,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending key in its message; surface it as the field.
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn dataset(&self) -> Result<DatasetKind> {
        DatasetKind::parse(&self.data.dataset).ok_or_else(|| {
            Error::config(
                "data.dataset",
                format!("unknown dataset {:?} (cifar10, mnist, synthetic)", self.data.dataset),
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.arch.as_str(), "mini-resnet" | "mini-mobilenet") {
            return Err(Error::config(
                "arch",
                format!("unknown architecture {:?} (mini-resnet, mini-mobilenet)", self.arch),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("must be in (0, 1], got {}", self.alpha)));
        }
        let r = self.resolutions;
        if r.low == 0 || r.high != 2 * r.low {
            return Err(Error::config(
                "resolutions",
                format!("high must be twice low, got low {} high {}", r.low, r.high),
            ));
        }
        let (_, native, _) = self.dataset()?.geometry();
        if r.high != native && r.high != 2 * native {
            return Err(Error::config(
                "resolutions.high",
                format!(
                    "{} images are {native}x{native}; high resolution must be {native} or {}",
                    self.data.dataset,
                    2 * native
                ),
            ));
        }
        self.train.validate()
    }

    pub fn base_spec(&self) -> Result<BaseNetworkSpec> {
        let (channels, _, classes) = self.dataset()?.geometry();
        Ok(match self.arch.as_str() {
            "mini-mobilenet" => BaseNetworkSpec::mini_mobilenet(channels, classes, self.alpha),
            _ => BaseNetworkSpec::mini_resnet(channels, classes, self.alpha),
        })
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed)
    }

    /// `--data-dir` beats the environment variable, which beats the config.
    pub fn resolve_data_dir(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .or_else(|| self.data.dir.clone())
    }
}
