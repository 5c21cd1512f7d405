//! Scenario configuration: TOML with one table per section, unknown keys
//! rejected, defaults for every field, and dotted-key overrides for sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::TrainConfig;
use crate::env::{
    DroneConfig, EnvConfig, QuantizerConfig, RadioConfig, RewardWeights, TopologyConfig,
};
use crate::traffic::TrafficConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid sweep `{0}`: expected name=v1,v2,...")]
    Sweep(String),
    #[error("cannot override `{key}`: {reason}")]
    Override { key: String, reason: String },
}

/// Evaluation and output settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: u64,
    /// Exploration kept during evaluation; 0 is the greedy policy.
    pub epsilon: f64,
    pub heatmap_cell_m: f64,
    /// Also write the per-TTI trace (large).
    pub trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 850,
            epsilon: 0.0,
            heatmap_cell_m: 25.0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub output_dir: String,
    pub topology: TopologyConfig,
    pub radio: RadioConfig,
    pub traffic: TrafficConfig,
    pub quantizer: QuantizerConfig,
    pub weights: RewardWeights,
    pub drone: DroneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: "out".into(),
            topology: TopologyConfig::default(),
            radio: RadioConfig::default(),
            traffic: TrafficConfig::default(),
            quantizer: QuantizerConfig::default(),
            weights: RewardWeights::default(),
            drone: DroneConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            topology: self.topology.clone(),
            radio: self.radio.clone(),
            traffic: self.traffic.clone(),
            quantizer: self.quantizer.clone(),
            weights: self.weights,
            drone: self.drone.clone(),
        }
    }

    /// Training parameters with the scenario seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eval.epsilon) {
            return Err(ConfigError::Parse("eval.epsilon must lie in [0, 1]".into()));
        }
        if self.eval.episodes == 0 {
            return Err(ConfigError::Parse("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    /// The resolved config as TOML, for embedding in outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A parsed but not yet typed configuration document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(toml::Table);

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        text.parse::<toml::Table>()
            .map(Self)
            .map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets `dotted.key` to `value`, creating intermediate tables.
    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<(), ConfigError> {
        let err = |reason: &str| ConfigError::Override {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(err("empty key segment"));
        }
        let (last, path) = parts.split_last().expect("split yields a segment");
        let mut table = &mut self.0;
        for p in path {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| err("not a section"))?;
        }
        table.insert(last.to_string(), value);
        Ok(())
    }

    pub fn resolve(&self) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = toml::Value::Table(self.0.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses one scalar as it would appear on the right of `=` in TOML; bare
/// words become strings.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<toml::Value>,
    /// Values as written, used for row labels.
    pub labels: Vec<String>,
}

impl Sweep {
    pub fn parse(def: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::Sweep(def.to_string());
        let (key, list) = def.split_once('=').ok_or_else(bad)?;
        let key = key.trim();
        let labels: Vec<String> = list.split(',').map(|v| v.trim().to_string()).collect();
        if key.is_empty() || labels.iter().any(|l| l.is_empty()) {
            return Err(bad());
        }
        Ok(Self {
            key: key.to_string(),
            values: labels.iter().map(|l| parse_value(l)).collect(),
            labels,
        })
    }

    /// `(label, config)` for every sweep point.
    pub fn expand(&self, base: &RawConfig) -> Result<Vec<(String, ScenarioConfig)>, ConfigError> {
        self.values
            .iter()
            .zip(&self.labels)
            .map(|(v, label)| {
                let mut raw = base.clone();
                raw.set(&self.key, v.clone())?;
                Ok((format!("{}={label}", self.key), raw.resolve()?))
            })
            .collect()
    }
}
