//! Layered settings: command-line flag, then config file, then built-in
//! default. Every value a command reads is recorded for its manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    source: Option<PathBuf>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, Value>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; underscores in keys are read as dashes.
pub fn parse_key_values(text: &str, path: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::config(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                i + 1
            ))
        })?;
        let key = normalize(k);
        if key.is_empty() {
            return Err(CliError::config(format!("{}:{}: empty key", path.display(), i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::config(format!(
                "{}:{}: duplicate key {key:?}",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(out)
}

/// Reads the `config` object of a manifest written by an earlier run.
fn manifest_values(json: &Value, path: &Path) -> CliResult<BTreeMap<String, String>> {
    let obj = json
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| CliError::config(format!("{}: manifest has no config object", path.display())))?;
    Ok(obj
        .iter()
        .filter_map(|(k, v)| {
            let s = match v {
                Value::Null => return None,
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            Some((normalize(k), s))
        })
        .collect())
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file = match serde_json::from_str::<Value>(&text) {
            Ok(json) if json.is_object() => manifest_values(&json, path)?,
            _ => parse_key_values(&text, path)?,
        };
        Ok(Settings {
            file,
            source: Some(path.to_path_buf()),
            ..Settings::default()
        })
    }

    #[cfg(test)]
    pub fn from_map(file: BTreeMap<String, String>) -> Self {
        Settings {
            file,
            ..Settings::default()
        }
    }

    fn file_value<T>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                let origin = self
                    .source
                    .as_deref()
                    .map_or_else(|| "config".to_string(), |p| p.display().to_string());
                CliError::config(format!("{origin}: bad value {raw:?} for {key}: {e}"))
            }),
        }
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.resolved.insert(key.to_string(), v);
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        self.record(key, &v);
        Ok(v)
    }

    /// A value that has no sensible default.
    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::config(format!("--{key} is required")))
    }

    /// Records a value computed by the command itself.
    pub fn note<T: Serialize>(&mut self, key: &str, value: &T) {
        self.record(key, value);
    }

    /// Config-file keys the command never asked for.
    pub fn unused(&self) -> Vec<&str> {
        self.file
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect()
    }

    pub fn resolved(&self) -> &BTreeMap<String, Value> {
        &self.resolved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let file = parse_key_values("# comment\nepochs = 7\nbatch_size=4\n\n", Path::new("c")).unwrap();
        let mut s = Settings::from_map(file);
        assert_eq!(s.value("epochs", Some(3usize), 40).unwrap(), 3);
        assert_eq!(s.value("batch-size", None, 16usize).unwrap(), 4);
        assert_eq!(s.value("lr", None, 1e-3).unwrap(), 1e-3);
        assert!(s.unused().is_empty());
        assert_eq!(s.resolved()["epochs"], Value::from(3));
    }

    #[test]
    fn malformed_files_are_config_errors() {
        assert!(parse_key_values("epochs 7", Path::new("c")).is_err());
        assert!(parse_key_values("a=1\na=2", Path::new("c")).is_err());
        let mut s = Settings::from_map(parse_key_values("epochs=many", Path::new("c")).unwrap());
        assert!(matches!(s.value("epochs", None, 1usize), Err(CliError::Config(_))));
    }

    #[test]
    fn manifest_config_objects_are_accepted() {
        let json: Value = serde_json::json!({"config": {"epochs": 2, "regime": "defense", "lr": 0.1, "model": null}});
        let map = manifest_values(&json, Path::new("m")).unwrap();
        assert_eq!(map["epochs"], "2");
        assert_eq!(map["regime"], "defense");
        assert_eq!(map["lr"], "0.1");
        assert!(!map.contains_key("model"));
    }
}
