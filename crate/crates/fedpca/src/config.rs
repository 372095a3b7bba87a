//! Experiment configuration: TOML parsing, validation, and scenario hashing.
//!
//! One TOML file describes a whole experiment matrix — the synthetic
//! scenario, the round schedule, local-training hyperparameters, the list of
//! methods to compare, and the seeds to replicate over. Unknown keys are
//! rejected so typos fail loudly instead of silently falling back to
//! defaults.

use crate::data::ScenarioConfig;
use crate::error::{Error, Result};
use crate::fed::{Method, RoundConfig, SelectionStrategy, TrainingConfig};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Noisy-data handling named in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategySpec {
    Drop,
    Hs,
}

fn default_tau_min() -> f64 {
    0.9
}

fn default_loss_q() -> f64 {
    1.0
}

/// One method entry in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Fedpca {
        strategy: StrategySpec,
        /// Confidence floor; only consulted by the `hs` strategy.
        #[serde(default = "default_tau_min")]
        tau_min: f64,
    },
    Fedavg,
    LossWeighted {
        #[serde(default = "default_loss_q")]
        q: f64,
    },
}

impl MethodSpec {
    pub fn to_method(self) -> Method {
        match self {
            MethodSpec::Fedpca { strategy: StrategySpec::Drop, .. } => {
                Method::FedPca(SelectionStrategy::Drop)
            }
            MethodSpec::Fedpca { strategy: StrategySpec::Hs, tau_min } => {
                Method::FedPca(SelectionStrategy::HighConfidence { tau_min })
            }
            MethodSpec::Fedavg => Method::FedAvg,
            MethodSpec::LossWeighted { q } => Method::LossWeighted { q },
        }
    }
}

/// A full experiment matrix: methods × seeds on one scenario.
///
/// Scalar fields come first so the TOML serialization is valid: top-level
/// keys must precede table sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub rounds: RoundConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.rounds.validate()?;
        self.training.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        let mut tokens = HashSet::new();
        for spec in &self.methods {
            let method = spec.to_method();
            method.validate()?;
            if !tokens.insert(method.token()) {
                return Err(Error::Config(format!(
                    "methods contains duplicate entry {}",
                    method.token()
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let unique: HashSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds contains duplicates".into()));
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.iter().map(|m| m.to_method()).collect()
    }
}

/// Parses and validates a config from TOML text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read config {}: {e}", path.display()),
        ))
    })?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// FNV-1a 64-bit hash.
fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1_0000_0000_01b3);
    }
    hash
}

/// Stable hex digest of a scenario: the FNV-1a hash of its canonical TOML
/// serialization. Identifies artifact files and summary records.
pub fn scenario_hash(scenario: &ScenarioConfig) -> Result<String> {
    let canonical = toml::to_string(scenario)
        .map_err(|e| Error::Parse(format!("scenario serialization failed: {e}")))?;
    Ok(format!("{:016x}", fnv1a_64(canonical.as_bytes())))
}
