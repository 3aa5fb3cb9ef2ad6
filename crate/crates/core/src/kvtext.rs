//! Flat `key = value` text used by config files and checkpoint headers.
//!
//! One entry per line; blank lines and lines starting with `#` are skipped.
//! Keys may appear only once.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvText {
    entries: BTreeMap<String, (usize, String)>,
}

fn bad(line: usize, reason: impl Into<String>) -> Error {
    Error::InvalidConfig(format!("line {line}: {}", reason.into()))
}

impl KvText {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(bad(i + 1, format!("expected key=value, got {line:?}")));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(bad(i + 1, "empty key"));
            }
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(bad(i + 1, format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parses `key` when present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| bad(*line, format!("{key}: cannot parse {v:?}: {e}"))),
        }
    }

    /// Like [`KvText::get`] but the key must be present.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::InvalidConfig(format!("missing key {key:?}")))
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (line, _))) => Err(bad(*line, format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, (_, v))| format!("{k}={v}\n")).collect()
    }
}
