//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use cglb_core::optimizer::OptimizerConfig;
use cglb_core::training::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV path, relative to the working directory.
    pub path: Option<PathBuf>,
    pub target: String,
    pub split_fraction: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            target: "y".into(),
            split_fraction: 2.0 / 3.0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Number of random hyperparameter draws.
    pub draws: usize,
    /// Adds one row per draw with every training point as an inducing input.
    pub include_full_inducing: bool,
    /// Largest training set for which the dense reference is computed.
    pub max_n: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            draws: 5,
            include_full_inducing: true,
            max_n: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub draws: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            draws: 3,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub output: OutputConfig,
    pub compare: CompareConfig,
    pub gradcheck: GradCheckConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.data.split_fraction > 0.0 && self.data.split_fraction < 1.0) {
            return bad(format!(
                "data.split_fraction {} not in (0, 1)",
                self.data.split_fraction
            ));
        }
        if self.data.source == DataSource::Csv && self.data.path.is_none() {
            return bad("data.path is required when data.source = \"csv\"".into());
        }
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.optimizer
            .validate()
            .map_err(|e| CliError::Config(format!("optimizer: {e}")))?;
        if !(self.gradcheck.step > 0.0 && self.gradcheck.tolerance > 0.0) {
            return bad("gradcheck.step and gradcheck.tolerance must be positive".into());
        }
        Ok(())
    }

    /// The resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cglb_core::training::ModelKind;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("[model]\nkind = \"cglb\"\nbogus = 1\n").is_err());
        assert!(Config::from_toml("sed = 3\n").is_err());
        assert!(Config::from_toml("[optimizer]\nc3 = 0.5\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = Config::from_toml(
            "seed = 9\n[model]\nkind = \"sgpr\"\nm = 8\n[data.synthetic]\nkind = \"gp_draw\"\nn = 50\n[optimizer]\nmax_steps = 17\n",
        )
        .unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Sgpr);
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("[data]\nsplit_fraction = 1.5\n").is_err());
        assert!(Config::from_toml("[data]\nsource = \"csv\"\n").is_err());
        assert!(Config::from_toml("[model]\nm = 0\n").is_err());
    }
}
