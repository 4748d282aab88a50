//! Flat `key = value` configuration with strict key checking.
//!
//! A config file is either flat text (one `key = value` per line, `#` starts a
//! comment, lists are comma separated) or a JSON summary written by a previous
//! run, in which case its `config` object is used.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Parsed but untyped configuration entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Value>,
}

fn scalar(text: &str) -> Value {
    let t = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        if !v.is_object() {
            return v;
        }
    }
    let unquoted = t
        .strip_prefix('\'')
        .and_then(|s| s.strip_suffix('\''))
        .unwrap_or(t);
    Value::String(unquoted.to_string())
}

fn flat_value(text: &str) -> Value {
    let t = text.trim();
    if !t.starts_with('[') && !t.starts_with('"') && t.contains(',') {
        Value::Array(t.split(',').map(scalar).collect())
    } else {
        scalar(t)
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        if text.trim_start().starts_with('{') {
            Self::parse_json(text)
        } else {
            Self::parse_flat(text)
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn parse_flat(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key = value", i + 1));
                continue;
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                problems.push(format!("line {}: empty key", i + 1));
            } else if entries.insert(key.clone(), flat_value(value)).is_some() {
                problems.push(format!("line {}: duplicate key {key}", i + 1));
            }
        }
        if problems.is_empty() {
            Ok(Self { entries })
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }

    fn parse_json(text: &str) -> Result<Self, CliError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad JSON: {e}")))?;
        let object = match value {
            Value::Object(mut o) => match o.remove("config") {
                Some(Value::Object(c)) => c,
                Some(_) => return Err(CliError::Config("`config` must be an object".into())),
                None => o,
            },
            _ => return Err(CliError::Config("JSON config must be an object".into())),
        };
        Ok(Self {
            entries: object.into_iter().collect(),
        })
    }

    pub fn insert(&mut self, key: &str, value: Value) {
        self.entries.insert(key.to_string(), value);
    }

    /// Overlays the entries on `T::default()`. Every unknown key is reported.
    pub fn into_params<T>(self) -> Result<T, CliError>
    where
        T: Default + Serialize + DeserializeOwned,
    {
        let Value::Object(mut merged) =
            serde_json::to_value(T::default()).map_err(|e| CliError::Config(e.to_string()))?
        else {
            return Err(CliError::Config("parameter set is not a map".into()));
        };
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !merged.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            let known: Vec<&str> = merged.keys().map(String::as_str).collect();
            return Err(CliError::Config(format!(
                "unknown keys: {}; accepted keys: {}",
                unknown.join(", "),
                known.join(", ")
            )));
        }
        for (k, v) in self.entries {
            let slot = merged.get_mut(&k).expect("checked above");
            *slot = match (&*slot, v) {
                (Value::Array(_), v @ (Value::Number(_) | Value::String(_) | Value::Bool(_))) => {
                    Value::Array(vec![v])
                }
                (Value::String(_), v @ (Value::Number(_) | Value::Bool(_))) => {
                    Value::String(v.to_string())
                }
                (_, v) => v,
            };
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Config(format!("bad value: {e}")))
    }
}

/// Flat `key = value` lines for a parameter set, sorted by key.
pub fn flat_lines<T: Serialize>(params: &T) -> Vec<String> {
    let Ok(Value::Object(map)) = serde_json::to_value(params) else {
        return Vec::new();
    };
    map.into_iter()
        .map(|(k, v)| format!("{k} = {}", flat_text(&v)))
        .collect()
}

fn flat_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(flat_text).collect::<Vec<_>>().join(","),
        Value::Null => "null".into(),
        other => other.to_string(),
    }
}

/// JSON object for `params`.
pub fn params_object<T: Serialize>(params: &T) -> Map<String, Value> {
    match serde_json::to_value(params) {
        Ok(Value::Object(m)) => m,
        _ => Map::new(),
    }
}
