use std::fs;
use std::path::{Path, PathBuf};

use atrium_core::dataset::DatasetConfig;
use atrium_core::inference::{RoiConfig, TilingConfig};
use atrium_core::net3d::UNetConfig;
use atrium_core::pipeline::AblationConfig;
use atrium_core::trainer::{RrsConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory (holds `manifest.json`).
    pub data: PathBuf,
    /// Where runs write their artifacts.
    pub out: PathBuf,
    /// Checkpoints of a cascade, level 0 first. Empty means
    /// `<out>/level*.ckpt.json` as written by `train` and `refine`.
    pub checkpoints: Vec<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "runs".into(),
            checkpoints: Vec::new(),
        }
    }
}

/// Everything a subcommand may need. The loss weights and the augmentation
/// live inside `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces `dataset.seed`, `train.seed`, `train.augment.seed`
    /// and `init_seed`.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub rrs: RrsConfig,
    pub roi: RoiConfig,
    pub tiling: TilingConfig,
    pub init_seed: u64,
}

impl RunConfig {
    /// Reads the base config (or defaults), applies `--set` overrides in
    /// order, then the global seed.
    pub fn resolve(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
                    key: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                serde_json::to_value(cfg)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config {
            key: "--set".into(),
            reason: e.to_string(),
        })?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.dataset.seed = s;
            cfg.train.seed = s;
            cfg.train.augment.seed = s;
            cfg.init_seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.phantom.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        self.rrs.validate()?;
        self.roi.validate()?;
        self.tiling.validate()?;
        Ok(())
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            unet: self.unet.clone(),
            train: self.train.clone(),
            rrs: self.rrs.clone(),
            roi: self.roi.clone(),
            tiling: self.tiling.clone(),
            init_seed: self.init_seed,
        }
    }
}

/// Applies one `key.path=value` override. The key must already exist (or
/// be an optional field currently unset); the value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| CliError::Config {
        key: assignment.into(),
        reason: "expected key=value".into(),
    })?;
    let key = key.trim();
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let missing = || CliError::Config {
            key: key.into(),
            reason: format!("unknown key `{}`", parts[..=i].join(".")),
        };
        node = match node {
            Value::Object(map) => map.get_mut(*part).ok_or_else(missing)?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| missing())?;
                items.get_mut(idx).ok_or_else(missing)?
            }
            _ => return Err(missing()),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    Ok(())
}
