//! Layered run configuration: preset, then a TOML or JSON file, then dotted
//! `--set key=value` overrides, then dedicated command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sevlm::generation::GenerationConfig;
use sevlm::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DataConfig {
    /// JSONL corpus; `--data` takes precedence.
    pub path: Option<PathBuf>,
    /// Seed of the train/val/test partition when samples carry no split.
    pub split_seed: u64,
    /// TSV lexicon replacing the bundled one.
    pub lexicon: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub generation: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            data: DataConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> anyhow::Result<Self> {
        Ok(RunConfig {
            model: ModelConfig::preset(name)?,
            train: TrainConfig::preset(name)?,
            ..RunConfig::default()
        })
    }
}

/// Reads a TOML or JSON document, chosen by extension (`.json` is JSON,
/// anything else TOML).
pub fn read_document(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let v: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(v)?)
    }
}

/// Recursively writes `overlay` onto `base`. Keys absent from `base` are
/// rejected with their dotted path. `Option` fields serialize as `null` in
/// the base, so they are known keys too.
pub fn merge(base: &mut Value, overlay: Value, path: &str) -> anyhow::Result<()> {
    match overlay {
        Value::Object(map) => {
            let Value::Object(target) = base else {
                // An object replacing a scalar or null, e.g. filling an `Option` struct.
                *base = Value::Object(map);
                return Ok(());
            };
            for (k, v) in map {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = target
                    .get_mut(&k)
                    .ok_or_else(|| sevlm::Error::Config(format!("unknown config key `{here}`")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

/// Parses one `dotted.key=value` override. The value is read as JSON when it
/// parses as JSON and as a plain string otherwise.
pub fn parse_override(spec: &str) -> anyhow::Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| sevlm::Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(sevlm::Error::Config(format!("override `{spec}` has an empty key segment")).into());
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

pub fn apply_override(doc: &mut Value, key: &[String], value: Value) -> anyhow::Result<()> {
    let mut overlay = value;
    for k in key.iter().rev() {
        let mut m = serde_json::Map::new();
        m.insert(k.clone(), overlay);
        overlay = Value::Object(m);
    }
    merge(doc, overlay, "")
}

/// Builds a config of type `C` from `base`, an optional file and overrides.
pub fn layered<C: Serialize + DeserializeOwned>(base: &C, file: Option<&Path>, overrides: &[String]) -> anyhow::Result<C> {
    let mut doc = serde_json::to_value(base)?;
    if let Some(path) = file {
        let overlay = read_document(path)?;
        merge(&mut doc, overlay, "").with_context(|| format!("in {}", path.display()))?;
    }
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        apply_override(&mut doc, &key, value).with_context(|| format!("in override `{spec}`"))?;
    }
    serde_json::from_value(doc).map_err(|e| sevlm::Error::Config(format!("invalid config: {e}")).into())
}
