//! Top-level TOML configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::SupplyChainConfig;
use crate::error::{Error, IoContext, Result};
use crate::evalstats::EvalConfig;
use crate::experiments::{BenchmarkConfig, ExperimentSettings, SearchConfig};
use crate::interpret::{DEFAULT_BINS, DEFAULT_GRID_POINTS};
use crate::policy::ActorConfig;
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub grid_points: usize,
    pub bins: usize,
    pub num_rollouts: usize,
    pub state_seed: u64,
    pub fidelity_probes: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            grid_points: DEFAULT_GRID_POINTS,
            bins: DEFAULT_BINS,
            num_rollouts: 50,
            state_seed: 7_777,
            fidelity_probes: 10_000,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::config("interpret.grid_points", "must be at least 2"));
        }
        if self.bins == 0 {
            return Err(Error::config("interpret.bins", "must be at least 1"));
        }
        if self.num_rollouts == 0 {
            return Err(Error::config("interpret.num_rollouts", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything a run needs, as read from one file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: SupplyChainConfig,
    pub ppo: PpoConfig,
    pub actor: ActorConfig,
    pub eval: EvalConfig,
    pub interpret: InterpretConfig,
    pub search: SearchConfig,
    pub benchmark: BenchmarkConfig,
    pub experiment: ExperimentSettings,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.env.validate().map_err(|e| prefix(e, "env"))?;
        self.ppo.validate()?;
        self.actor.validate()?;
        self.eval.validate()?;
        self.interpret.validate()?;
        self.search.validate()?;
        self.benchmark.validate()?;
        self.experiment.validate()?;
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Config = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(error_field(&e), e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).at(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).at(path)
    }
}

fn prefix(e: Error, section: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

fn error_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown keys as "unknown field `name`, expected ..."
    msg.split('`').nth(1).map_or_else(|| "<file>".to_string(), str::to_string)
}

/// Sets `a.b.c = value`; the value is read as a TOML literal and falls back
/// to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(assignment, "empty key in override"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let mut cursor = table;
    for key in &keys[..keys.len() - 1] {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{key}` is not a section")))?;
    }
    cursor.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
