//! Run configuration: a TOML file with one section per module, plus
//! `section.key=value` overrides from the command line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterConfig;
use crate::gp::DEFAULT_NOISE_VAR;
use crate::inference::{Model, ScheduleConfig};
use crate::io::HoldoutSpec;
use crate::kernel::KernelAst;
use crate::pipeline::CompareStart;
use crate::prior::PriorConfig;
use crate::synth::SynthKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Fit,
    Predict,
    Cluster,
    CompareInference,
    SynthData,
}

/// Synthetic data used when no data file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    /// Points per series.
    pub n: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::LinPlusPer,
            n: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Probe points of the prediction grid.
    pub grid_points: usize,
    /// Posterior function draws added as columns of the predictions table.
    pub predictive_samples: usize,
    /// Most posterior samples entering a model average.
    pub max_averaged: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            grid_points: 200,
            predictive_samples: 0,
            max_averaged: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Fixed structure whose hyperparameters are inferred. Its hyperparameter
    /// values are the starting point when `start` is `given`.
    #[serde(deserialize_with = "crate::inference::tree_literal")]
    pub structure: String,
    pub start: CompareStart,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            structure: r#"["PER", 1.0, 1.0]"#.to_string(),
            start: CompareStart::Prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub noise_var: f64,
    /// Standardize inputs and outputs; unset means on for data files and
    /// off for generated data.
    pub standardize: Option<bool>,
    pub prior: PriorConfig,
    pub schedule: ScheduleConfig,
    pub cluster: ClusterConfig,
    pub holdout: HoldoutSpec,
    pub synth: SynthConfig,
    pub output: OutputConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Fit,
            noise_var: DEFAULT_NOISE_VAR,
            standardize: None,
            prior: PriorConfig::default(),
            schedule: ScheduleConfig::default(),
            cluster: ClusterConfig::default(),
            holdout: HoldoutSpec::default(),
            synth: SynthConfig::default(),
            output: OutputConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut node = table;
    for key in parents {
        node = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    }
    node.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults only when absent) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.display().to_string(),
                message: e.to_string(),
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "noise_var must be positive, got {}",
                self.noise_var
            )));
        }
        self.prior.validate().map_err(|e| invalid(&e))?;
        self.schedule.validate().map_err(|e| invalid(&e))?;
        self.holdout.validate().map_err(|e| invalid(&e))?;
        if !(self.cluster.concentration > 0.0 && self.cluster.concentration.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "cluster.concentration must be positive, got {}",
                self.cluster.concentration
            )));
        }
        if self.synth.n == 0 {
            return Err(ConfigError::Invalid("synth.n must be at least 1".into()));
        }
        if self.output.max_averaged == 0 {
            return Err(ConfigError::Invalid(
                "output.max_averaged must be at least 1".into(),
            ));
        }
        KernelAst::from_json_str(&self.compare.structure).map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn model(&self) -> Model {
        Model {
            prior: self.prior.clone(),
            noise_var: self.noise_var,
        }
    }

    /// The configuration as TOML, as accepted by [`RunConfig::from_toml_str`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
