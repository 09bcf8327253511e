//! Layered run configuration: built-in defaults, then a TOML file, then
//! `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::experiments::AugmentationPlan;
use crate::trainer::TrainConfig;

pub const CONFIG_ENV: &str = "GAITCRAFT_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root or manifest path.
    pub dataset: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPlan,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// Model config with the clip length taken from the training section.
    pub fn model_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            clip_length: self.train.clip_length,
            ..self.model.clone()
        }
    }
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

/// Parse the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Defaults < file < overrides. Unknown keys at any layer are rejected.
pub fn load_run_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let defaults = toml::to_string(&RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut root: Table = toml::from_str(&defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let layer: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // validate the file alone so errors name the file
        Value::Table(layer.clone())
            .try_into::<RunConfig>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut root, layer);
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
