//! Experiment configuration: one TOML file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sego_core::env::{ChainArithSpec, Environment, GridNavSpec};
use sego_core::trainer::TrainerConfig;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Gridnav(GridNavSpec),
    Chainarith(ChainArithSpec),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Gridnav(GridNavSpec { width: 5, height: 5, horizon: 8, start: (0, 0) })
    }
}

impl EnvConfig {
    pub fn build(&self) -> sego_core::Result<Environment> {
        match self {
            EnvConfig::Gridnav(spec) => Environment::gridnav(spec),
            EnvConfig::Chainarith(spec) => Environment::chainarith(spec),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Toml,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub report_format: ReportFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default"), report_format: ReportFormat::Toml }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub ablate: AblateConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config file {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| UsageError(format!("{}: {}", p.display(), e.0)))
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies `key=value` overrides where `key` is a dotted path such as
    /// `trainer.n_max` and `value` is a TOML literal (bare words are strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, UsageError> {
        let mut root: toml::Table = toml::from_str(&self.to_toml()).expect("serialized config parses");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| UsageError(format!("override '{item}' is not of the form key=value")))?;
            let value = parse_literal(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields at least one piece");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| UsageError(format!("override key '{key}': '{p}' is not a table")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&root).expect("table serializes");
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<Environment, UsageError> {
        self.trainer.validate().map_err(|e| UsageError(e.to_string()))?;
        self.env.build().map_err(|e| UsageError(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
