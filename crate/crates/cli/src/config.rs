//! Run configuration: a TOML file merged over the defaults, then `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use xling_core::experiment::ExperimentConfig;
use xling_core::vocab::BaseUnit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSettings {
    pub num_merges: usize,
    pub base: BaseUnit,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            num_merges: 0,
            base: BaseUnit::Word,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub vocab: VocabSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("invalid override {0:?}: expected key.path=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Rejected(#[from] xling_core::experiment::ExperimentError),
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = match table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(ConfigError::Invalid(format!("{key}: {part} is not a section"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("defaults serialize to a table")
}

impl RunConfig {
    /// Defaults, overlaid by `file` (if any), then by each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = to_table(&ExperimentConfig::default());
        root.insert("vocab".into(), Value::Table(to_table(&VocabSettings::default())));
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.display().to_string(),
                source,
            })?;
            let user: Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Syntax(format!("{}: {e}", path.display())))?;
            merge(&mut root, user);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let vocab = match root.remove("vocab") {
            Some(v) => v
                .try_into::<VocabSettings>()
                .map_err(|e| ConfigError::Invalid(format!("vocab: {e}")))?,
            None => VocabSettings::default(),
        };
        let experiment: ExperimentConfig = Value::Table(root)
            .try_into()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        // The corpus seed always follows the root seed.
        let experiment = experiment.with_seed(experiment.seed);
        experiment.validate()?;
        Ok(Self { experiment, vocab })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.experiment = self.experiment.with_seed(s);
        }
        self
    }

    /// The resolved configuration as JSON, echoed into reports.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.experiment).expect("config serializes");
        v["vocab"] = serde_json::to_value(&self.vocab).expect("config serializes");
        v
    }
}
