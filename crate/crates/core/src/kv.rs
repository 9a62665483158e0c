//! Flat `key=value` text used for config files, snapshots and manifests.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value map. Insertion order is preserved on output so snapshots
/// are stable and diff-friendly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            map.set(k.trim(), v.trim());
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Parsed value of `key`, or `default` when the key is absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for {key}: {raw:?}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Parse(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("bad value for {key}: {raw:?}")))
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
