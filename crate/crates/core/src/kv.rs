//! Flat `key=value` text used for config files, manifests, and reports.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("missing key {0:?}")]
    Missing(String),
}

/// Parsed `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; whitespace around keys and values is trimmed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(KvError::Duplicate(key));
            }
        }
        Ok(Self { entries })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| KvError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        self.get(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), KvError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key not listed in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(KvError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Accumulates ordered `key=value` lines.
#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(key);
        self.out.push('=');
        self.out.push_str(&value.to_string());
        self.out.push('\n');
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}
