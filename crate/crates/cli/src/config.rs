//! JSON experiment configuration shared by `train`, `eval` and `ablate`.

use std::fs;
use std::path::Path;

use geowalk::bvm::{FilterMode, DEFAULT_BINS};
use geowalk::evalbench::BenchmarkConfig;
use geowalk::gnnembed::{TrainConfig, YawMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Benchmark settings in a serialisable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub walk_length: usize,
    pub fovs: Vec<f64>,
    /// `none`, `bvm` or `bvm-yaw`.
    pub modes: Vec<String>,
    pub bins: usize,
    pub seeds: Vec<u64>,
    pub k_list: Vec<usize>,
    pub percent_list: Vec<f64>,
    pub yaw_mode: YawMode,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let d = BenchmarkConfig::default();
        Self {
            walk_length: d.walk_length,
            fovs: d.fovs,
            modes: d.modes.iter().map(|m| m.as_str().to_string()).collect(),
            bins: DEFAULT_BINS,
            seeds: d.seeds,
            k_list: d.k_list,
            percent_list: d.percent_list,
            yaw_mode: d.yaw_mode,
        }
    }
}

impl BenchSettings {
    pub fn to_config(&self) -> Result<BenchmarkConfig, CliError> {
        let modes = self
            .modes
            .iter()
            .map(|m| m.parse::<FilterMode>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(BenchmarkConfig {
            walk_length: self.walk_length,
            fovs: self.fovs.clone(),
            modes,
            k_list: self.k_list.clone(),
            percent_list: self.percent_list.clone(),
            seeds: self.seeds.clone(),
            bins: self.bins,
            yaw_mode: self.yaw_mode,
            bearing_noise: Default::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub bench: BenchSettings,
    /// Share of the training city held out for validation.
    pub val_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            bench: BenchSettings::default(),
            val_fraction: 0.1,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` if given. Also reports whether the file pinned the layer
    /// schedule, so callers can adapt the input width to the features.
    pub fn load(path: Option<&Path>) -> Result<(Self, bool), CliError> {
        let Some(path) = path else {
            return Ok((Self::default(), false));
        };
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let pinned = value.get("train").and_then(|t| t.get("layer_dims")).is_some();
        let cfg = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, pinned))
    }
}
