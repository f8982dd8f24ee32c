//! Flat JSON run configuration.
//!
//! A config file is a JSON object whose keys are dotted paths such as
//! `tokenizer.lr` (nested objects are flattened the same way). Command-line
//! `--set key=value` pairs are applied on top. Each command pulls typed
//! sections out of the merged map; the section's defaults are serialized,
//! flattened, patched with matching keys and deserialized back, so every
//! field of a config struct is addressable without a hand-written table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub type Flat = BTreeMap<String, Value>;

fn flatten_into(prefix: &str, value: &Value, out: &mut Flat) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

pub fn flatten(value: &Value) -> Flat {
    let mut out = Flat::new();
    flatten_into("", value, &mut out);
    out
}

fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flattened keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// A `--set` value: JSON if it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

#[derive(Debug)]
pub struct RunConfig {
    overrides: Flat,
    used: BTreeSet<String>,
    resolved: Flat,
}

impl RunConfig {
    pub fn new(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut overrides = Flat::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            let value: Value = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("config {} is not valid JSON: {e}", path.display()))
            })?;
            if !value.is_object() {
                return Err(CliError::Usage(format!(
                    "config {} must be a JSON object",
                    path.display()
                )));
            }
            overrides.extend(flatten(&value));
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(CliError::Usage(format!("--set has an empty key in `{s}`")));
            }
            overrides.insert(k.to_string(), parse_value(v.trim()));
        }
        Ok(Self {
            overrides,
            used: BTreeSet::new(),
            resolved: Flat::new(),
        })
    }

    /// Typed section under `prefix`, starting from `default`.
    pub fn section<T: Serialize + DeserializeOwned>(
        &mut self,
        prefix: &str,
        default: T,
    ) -> Result<T, CliError> {
        let base = serde_json::to_value(&default).map_err(|e| CliError::Runtime(e.into()))?;
        let mut flat = flatten(&base);
        let lead = format!("{prefix}.");
        for (key, v) in &self.overrides {
            if let Some(field) = key.strip_prefix(&lead) {
                if flat.contains_key(field) {
                    flat.insert(field.to_string(), v.clone());
                    self.used.insert(key.clone());
                }
            }
        }
        let value: T = serde_json::from_value(unflatten(&flat))
            .map_err(|e| CliError::Usage(format!("invalid value in section `{prefix}`: {e}")))?;
        let check =
            flatten(&serde_json::to_value(&value).map_err(|e| CliError::Runtime(e.into()))?);
        for (k, v) in check {
            self.resolved.insert(format!("{prefix}.{k}"), v);
        }
        Ok(value)
    }

    /// Single top-level value.
    pub fn scalar<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        let value = match self.overrides.get(key) {
            Some(v) => {
                self.used.insert(key.to_string());
                serde_json::from_value(v.clone())
                    .map_err(|e| CliError::Usage(format!("invalid value for `{key}`: {e}")))?
            }
            None => default,
        };
        self.record(key, &value);
        Ok(value)
    }

    /// Adds an entry to the resolved config without consulting overrides.
    pub fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.resolved.insert(key.to_string(), v);
    }

    /// Fails on override keys that no section consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .overrides
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "unknown config key(s): {}",
                unknown.join(", ")
            )))
        }
    }

    pub fn resolved(&self) -> &Flat {
        &self.resolved
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(&self.resolved).expect("flat map serializes") + "\n"
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.resolved_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
