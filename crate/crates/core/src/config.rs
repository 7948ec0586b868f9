//! Run configuration loaded from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::env::EpisodeConfig;
use crate::planner::PlannerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Recommendation probability of the Max Entropy baseline.
    pub p_rec: f64,
    /// Pattern length for action-pattern statistics.
    pub pattern_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { p_rec: 0.3, pattern_len: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogSource {
    /// Catalog file; when absent the synthetic generator is used.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub split_seed: u64,
    pub out: PathBuf,
    pub catalog: CatalogSource,
    pub encoder: EncoderConfig,
    pub episode: EpisodeConfig,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            split_seed: 1,
            out: PathBuf::from("runs"),
            catalog: CatalogSource::default(),
            encoder: EncoderConfig::default(),
            episode: EpisodeConfig::default(),
            planner: PlannerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate().map_err(ConfigError::Invalid)?;
        self.episode.validate().map_err(ConfigError::Invalid)?;
        self.planner.validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        if !(0.0..=1.0).contains(&self.eval.p_rec) {
            return Err(ConfigError::Invalid(format!("eval.p_rec must lie in [0, 1], got {}", self.eval.p_rec)));
        }
        if self.eval.pattern_len == 0 {
            return Err(ConfigError::Invalid("eval.pattern_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Mode;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[train]\nmode = \"sapient-e\"\nsteps = 5\n[planner]\nn = 3\nw = 0.0\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.mode, Mode::SapientE);
        assert_eq!(c.train.steps, 5);
        assert_eq!((c.planner.n, c.planner.w), (3, 0.0));
        assert_eq!(c.train.lr, 1e-4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sead = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nbatch = 3"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[encoder]\nd = 10\nheads = 4"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("[planner]\nn = 0"), Err(ConfigError::Invalid(_))));
    }
}
