//! Experiment configuration files: TOML sections mapping 1:1 onto
//! [`ExperimentConfig`], with dotted-key overrides for sweeps and ablations.
//!
//! Unknown keys are rejected so typos fail loudly; defaults fill absent keys
//! and are echoed back into the resolved-config output.

use std::path::Path;

use toml::Value;

use crate::engine::ExperimentConfig;
use crate::error::{Error, Result};

/// Parse a TOML config file into a validated [`ExperimentConfig`].
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Parse TOML text into a validated [`ExperimentConfig`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    config_from_value(Value::Table(parse_table(text)?))
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse()
        .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))
}

fn config_from_value(value: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("config error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply `key=value` overrides (dotted keys reach nested tables, e.g.
/// `soda.lambda_d=10`) on top of TOML text and return the merged config.
pub fn config_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = Value::Table(parse_table(text)?);
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override `{item}` is not of the form key=value"))
        })?;
        set_dotted(&mut value, key.trim(), parse_scalar(raw.trim()))?;
    }
    config_from_value(value)
}

/// Interpret an override value: integer, float, boolean, or bare string.
pub fn parse_scalar(raw: &str) -> Value {
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::Float(f);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Boolean(b);
    }
    Value::String(raw.trim_matches('"').to_string())
}

fn set_dotted(root: &mut Value, key: &str, new: Value) -> Result<()> {
    if key.is_empty() {
        return Err(Error::InvalidConfig("empty override key".into()));
    }
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override key `{key}`: `{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("override key `{key}` does not reach a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), new);
    Ok(())
}

/// Serialize the resolved config (defaults included) to TOML. Serializing
/// through a `Value` lets the writer order scalars before tables regardless
/// of struct field order.
pub fn resolved_toml(cfg: &ExperimentConfig) -> Result<String> {
    let value = Value::try_from(cfg)
        .map_err(|e| Error::InvalidConfig(format!("config serialization failed: {e}")))?;
    toml::to_string_pretty(&value)
        .map_err(|e| Error::InvalidConfig(format!("config serialization failed: {e}")))
}
