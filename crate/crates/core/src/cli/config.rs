//! Layered settings: built-in defaults, then a JSON config file with flat
//! kebab-case keys, then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::CliError;

fn as_object(value: Value, what: &str) -> Result<Map<String, Value>, CliError> {
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::Validation(format!("{what} must be a JSON object"))),
    }
}

/// Merges `defaults`, the optional config file and the flags that were set.
/// Unknown config-file keys are rejected.
pub fn resolve<S, F>(defaults: &S, config_file: Option<&Path>, flags: &F) -> Result<S, CliError>
where
    S: Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = as_object(serde_json::to_value(defaults).expect("settings serialize"), "defaults")?;
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", path.display())))?;
        for (key, v) in as_object(value, "config file")? {
            if !merged.contains_key(&key) {
                let mut known: Vec<&String> = merged.keys().collect();
                known.sort();
                return Err(CliError::Validation(format!(
                    "unknown config key {key:?}; known keys: {}",
                    known.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            merged.insert(key, v);
        }
    }
    let flags = as_object(serde_json::to_value(flags).expect("flags serialize"), "flags")?;
    for (key, v) in flags {
        merged.insert(key, v);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Validation(format!("invalid settings: {e}")))
}
