//! Run configuration: a single JSON/TOML file plus flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use desca::descriptors::DescriptorKind;
use desca::filter::FilterWeights;
use desca::geometry::DescriptorParams;
use desca::selfconv::ComputePath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    Uniform,
    Guided,
}

impl std::str::FromStr for WeightsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(WeightsMode::Uniform),
            "guided" => Ok(WeightsMode::Guided),
            other => Err(format!(
                "unknown weights mode '{other}' (expected uniform|guided)"
            )),
        }
    }
}

/// Everything a run needs. Defaults are the standard parameter bundle with
/// guided weights (epsilon = 0.03^2) and the fast compute path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub descriptor: DescriptorKind,
    pub params: DescriptorParams,
    pub weights: WeightsMode,
    pub epsilon: f64,
    pub path: ComputePath,
    pub max_disp: usize,
    pub threshold: f64,
    pub threads: Option<usize>,
    pub input: Option<PathBuf>,
    pub left: Option<PathBuf>,
    pub right: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            descriptor: DescriptorKind::Desca,
            params: DescriptorParams::default(),
            weights: WeightsMode::Guided,
            epsilon: 0.03 * 0.03,
            path: ComputePath::Fast,
            max_disp: 16,
            threshold: 1.0,
            threads: None,
            input: None,
            left: None,
            right: None,
            gt: None,
            mask: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; TOML when the extension is `.toml`, JSON
    /// otherwise.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| format!("bad toml config: {e}"))
        } else {
            serde_json::from_str(&text).map_err(|e| format!("bad json config: {e}"))
        }
    }

    pub fn filter_weights(&self) -> FilterWeights {
        let radius = self.params.patch_radius().max(1);
        match self.weights {
            WeightsMode::Uniform => FilterWeights::uniform(radius),
            WeightsMode::Guided => FilterWeights::guided(radius, self.epsilon),
        }
    }
}
