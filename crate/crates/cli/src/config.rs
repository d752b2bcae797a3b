//! Run configuration: one TOML document covering every stage, with
//! `section.key=value` overrides from the command line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use moma_core::metrics::EvalConfig;
use moma_core::simulator::SceneConfig;
use moma_core::trainer::TrainConfig;
use moma_core::{TrackerConfig, TransformerConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and batch sampling.
    pub seed: u64,
    /// Scalar type used for training.
    pub precision: Precision,
    /// Scenes written by `simulate`.
    pub num_scenes: usize,
    pub scene: SceneConfig,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            num_scenes: 10,
            scene: SceneConfig::default(),
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| {
                CliError::Usage(format!("invalid configuration: {}", e.message()))
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage =
            |section: &str, e: moma_core::Error| CliError::Usage(format!("[{section}] {e}"));
        self.scene.validate().map_err(|e| usage("scene", e))?;
        self.model.validate().map_err(|e| usage("model", e))?;
        self.train.validate().map_err(|e| usage("train", e))?;
        self.tracker.validate().map_err(|e| usage("tracker", e))?;
        self.eval.validate().map_err(|e| usage("eval", e))?;
        if self.num_scenes == 0 {
            return Err(CliError::Usage("num_scenes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sets `a.b.c=value` in `doc`. The value is parsed as a TOML value and
/// falls back to a plain string.
fn apply_override(doc: &mut toml::Table, arg: &str) -> Result<(), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {arg:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!(
            "override key {key:?} is malformed"
        )));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {part} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
