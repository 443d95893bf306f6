//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::equivalence::Tolerances;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::planner::Grid;
use crate::reference;
use crate::tensor::DType;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sgd,
    Ssgd,
    Lockstep,
}

/// Either a named preset or an inline layer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    Preset { preset: String },
    Inline(NetworkSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdSettings {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor.
    pub per_tensor: usize,
    /// Largest accepted relative error.
    pub tol: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            eps: 1e-5,
            per_tensor: 200,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub network: NetworkRef,
    #[serde(default = "one")]
    pub input_channels: usize,
    pub image_size: usize,
    pub grid: Grid,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: DType,
    pub mode: Mode,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Overrides the precision's default tolerances.
    #[serde(default)]
    pub tolerances: Option<Tolerances>,
    #[serde(default)]
    pub finite_difference: FdSettings,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn default_train_samples() -> usize {
    64
}

fn default_test_samples() -> usize {
    64
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Field checks that do not depend on plan feasibility.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.image_size == 0 || self.batch_size == 0 || self.input_channels == 0 {
            return bad("image_size, batch_size and input_channels must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.train_samples < 2
            || !self.train_samples.is_multiple_of(2)
            || self.test_samples < 2
            || !self.test_samples.is_multiple_of(2)
        {
            return bad("train_samples and test_samples must be even and at least 2".into());
        }
        let fd = &self.finite_difference;
        if !(fd.eps > 0.0) || fd.per_tensor == 0 || !(fd.tol >= 0.0) {
            return bad("finite_difference settings must be positive".into());
        }
        if let Some(t) = &self.tolerances {
            if [t.loss, t.split_map, t.grads].iter().any(|v| !(*v >= 0.0)) {
                return bad("tolerances must be non-negative".into());
            }
        }
        let net = self.network()?;
        if net.input_channels != self.input_channels {
            return bad(format!(
                "network expects {} input channels, config has {}",
                net.input_channels, self.input_channels
            ));
        }
        net.validate(self.image_size).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        match &self.network {
            NetworkRef::Preset { preset } => reference::by_name(preset, self.input_channels).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {preset:?}; known: {}",
                    reference::PRESETS.join(", ")
                ))
            }),
            NetworkRef::Inline(net) => Ok(net.clone()),
        }
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances.unwrap_or_else(|| Tolerances::for_dtype(self.precision))
    }

    /// Seeds for training data, parameter init and the held-out set.
    pub fn seeds(&self) -> (u64, u64, u64) {
        (self.seed, self.seed.wrapping_add(1), self.seed.wrapping_add(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> String {
        r#"{
            "version": 1,
            "network": {"preset": "global_task"},
            "image_size": 256,
            "grid": {"rows": 4, "cols": 4},
            "batch_size": 8,
            "steps": 10,
            "learning_rate": 0.05,
            "seed": 1,
            "precision": "double",
            "mode": "ssgd"
        }"#
        .to_string()
    }

    #[test]
    fn parses_preset_and_defaults() {
        let cfg = ExperimentConfig::from_json(&sample()).unwrap();
        assert_eq!(cfg.mode, Mode::Ssgd);
        assert_eq!(cfg.input_channels, 1);
        assert_eq!(cfg.finite_difference, FdSettings::default());
        assert_eq!(cfg.network().unwrap(), reference::global_task(1));
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn parses_inline_network() {
        let text = sample().replace(
            r#"{"preset": "global_task"}"#,
            r#"{"input_channels": 1, "split_index": 1, "layers": [
                {"kind": "conv", "k": 3, "s": 1, "c_in": 1, "c_out": 2},
                {"kind": "flatten"}, {"kind": "dense", "width": 1}]}"#,
        );
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert!(matches!(cfg.network, NetworkRef::Inline(_)));
    }

    #[test]
    fn rejects_bad_configs() {
        for (from, to) in [
            ("\"version\": 1", "\"version\": 7"),
            ("\"steps\": 10", "\"steps\": 10, \"typo\": 1"),
            ("\"learning_rate\": 0.05", "\"learning_rate\": -1"),
            ("global_task", "nope"),
            ("\"image_size\": 256", "\"image_size\": 4"),
            ("\"double\"", "\"half\""),
        ] {
            let text = sample().replace(from, to);
            assert!(
                matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))),
                "{to}"
            );
        }
        assert!(ExperimentConfig::from_json("{").is_err());
    }
}
