use std::path::Path;

use serde::{Deserialize, Serialize};
use vlrm_core::hashing::content_hash;
use vlrm_core::model::{DecodeConfig, ModelConfig};
use vlrm_core::scorers::SimOracle;
use vlrm_core::textcore::CorpusConfig;
use vlrm_core::trainer::{MleConfig, TrainConfig};

use crate::error::CliError;

/// Everything a run needs, read from a single TOML file. Missing sections
/// and keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: MleConfig,
    pub trainer: TrainConfig,
    pub scorers: ScorerConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub sim: SimOracle,
    pub reflm_order: usize,
    pub reflm_smoothing: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            sim: SimOracle::default(),
            reflm_order: 3,
            reflm_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decode: DecodeConfig::inference(),
            ks: vec![1, 5, 10],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// The default configuration when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&crate::io::read_input(p, "config file")?),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of the canonical encoding; independent of key order in
    /// the source file.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}
