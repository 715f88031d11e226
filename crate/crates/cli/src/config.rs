//! Key-value config files and run manifests.
//!
//! Configs are plain text: one `key = value` per line, `#` comments, blank
//! lines ignored. Every command declares its known keys; unknown keys are
//! rejected so typos fail loudly. Command-line flags override file values.
//!
//! Every run writes a manifest next to its primary output (`<out>.manifest`,
//! or `manifest.txt` inside an output directory) recording the subcommand,
//! inputs, outputs, seed, and the fully resolved configuration, so any
//! artifact can be reproduced from its manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Parsed key-value config with typed, defaulted accessors.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl Config {
    pub fn empty() -> Self {
        Config::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    idx + 1
                );
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config {
            values,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Force a value (flag override).
    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    /// Reject keys outside the command's vocabulary.
    pub fn check_known_keys(&self, known: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !known.contains(&key.as_str()) {
                bail!(
                    "unknown config key {key:?}; known keys: {}",
                    known.join(", ")
                );
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("config key {key} = {v:?} is not an integer")),
            None => Ok(default),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("config key {key} = {v:?} is not an integer")),
            None => Ok(default),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("config key {key} = {v:?} is not a number")),
            None => Ok(default),
        }
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.values.get(key) {
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse()
                        .with_context(|| format!("config key {key} has non-integer item {item:?}"))
                })
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

}

/// Accumulates manifest entries, then writes them in one shot.
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            entries: vec![("command".to_string(), command.to_string())],
        }
    }

    pub fn entry(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn config(&mut self, config: &Config) -> &mut Self {
        if let Some(path) = config.path() {
            self.entry("config_file", path.display());
        }
        self
    }

    /// Write `<target>.manifest` (or `manifest.txt` inside a directory).
    pub fn write_for(&self, target: &Path) -> Result<()> {
        let path = if target.is_dir() {
            target.join("manifest.txt")
        } else {
            let mut name = target.as_os_str().to_owned();
            name.push(".manifest");
            PathBuf::from(name)
        };
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(&path, text).with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(())
    }
}
