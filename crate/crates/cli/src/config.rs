//! Run configuration file and thresholds file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use drae_core::aggregation::Level;
use drae_core::network::NetConfig;
use drae_core::synthkit::{KitPlan, StripSpec};
use drae_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Either a preset name (`paper`, `desk`, `toy`) or a full table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetChoice {
    Preset(String),
    Custom(NetConfig),
}

impl NetChoice {
    pub fn resolve(&self) -> Result<NetConfig> {
        let net = match self {
            NetChoice::Preset(name) => preset(name)?,
            NetChoice::Custom(c) => c.clone(),
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn preset(name: &str) -> Result<NetConfig> {
    Ok(match name {
        "paper" => NetConfig::paper(),
        "desk" => NetConfig::desk(),
        "toy" => NetConfig::toy(),
        other => bail!("unknown network preset {other:?} (paper, desk, toy)"),
    })
}

/// Optional sections of the `--config` file; missing sections fall back to
/// the desk-scale defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub net: Option<NetChoice>,
    pub train: Option<TrainConfig>,
    pub kit: Option<KitPlan>,
    pub strip: Option<StripSpec>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        Ok(cfg)
    }

    pub fn net(&self) -> Result<NetConfig> {
        self.net.clone().unwrap_or(NetChoice::Preset("desk".into())).resolve()
    }

    pub fn train(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(TrainConfig::desk)
    }
}

/// Calibrated per-region thresholds as written by `calibrate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub level: Level,
    pub thresholds: Vec<f64>,
    /// Balanced accuracy of each region's threshold on the calibration split.
    pub calibration_balanced_accuracy: Vec<f64>,
}

impl ThresholdsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading thresholds {}", path.display()))?;
        let t: ThresholdsFile = toml::from_str(&text).with_context(|| format!("parsing thresholds {}", path.display()))?;
        drae_core::scoring::RegionThresholds::new(t.thresholds.clone())?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
