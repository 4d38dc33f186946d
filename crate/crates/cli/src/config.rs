//! Line-oriented `key = value` config files and resolved-config persistence.
//!
//! Any long flag can be supplied from a file; explicit command-line flags
//! win. Whatever a run actually used is written next to its outputs as
//! `config.resolved` so every run is reproducible from disk.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::{data_err, usage, CliError};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Merges one setting: CLI flag beats config file beats default. The chosen
/// value lands in the resolved map.
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    pub resolved: BTreeMap<String, String>,
    used_keys: Vec<String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a ConfigFile) -> Self {
        Resolver { file, resolved: BTreeMap::new(), used_keys: Vec::new() }
    }

    pub fn settle<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
    {
        self.used_keys.push(key.to_string());
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(s) => s
                    .parse::<T>()
                    .map_err(|_| usage(format!("config key {key}: cannot parse {s:?}")))?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn settle_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
    {
        self.used_keys.push(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(s) => Some(
                    s.parse::<T>()
                        .map_err(|_| usage(format!("config key {key}: cannot parse {s:?}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Unknown keys in the config file are rejected, mirroring unknown-flag
    /// rejection on the command line.
    pub fn reject_unknown_keys(&self) -> Result<(), CliError> {
        for key in self.file.keys() {
            if !self.used_keys.iter().any(|k| k == key) {
                return Err(usage(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn persist(&self, out_dir: &Path, command: &str) -> Result<(), CliError> {
        let mut text = format!("# resolved configuration: {command}\n");
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let path = out_dir.join("config.resolved");
        std::fs::write(&path, text)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}
