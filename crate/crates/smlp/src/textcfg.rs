//! Minimal sectioned key/value text format used for model and training
//! configuration files.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Keys keep file order within their section; later duplicates win lookups.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct TextConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl TextConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TextConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                cfg.sections.push((name.trim().to_string(), Vec::new()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                ))
            })?;
            let section = cfg.sections.last_mut().ok_or_else(|| {
                Error::Config(format!("line {}: key outside any [section]", lineno + 1))
            })?;
            section
                .1
                .push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(cfg)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == section)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .filter(|(n, _)| n == section)
            .flat_map(|(_, kv)| kv.iter())
            .rfind(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::Config(format!("missing key '{key}' in section [{section}]")))
    }

    pub fn parse_value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value '{raw}' for [{section}] {key}"))),
        }
    }

    pub fn require_value<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.require(section, key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Config(format!("invalid value '{raw}' for [{section}] {key}")))
    }
}

/// Parses a comma-separated list like `2,8,14,2`.
pub fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid list element '{part}'")))
        })
        .collect()
}

pub fn parse_bool(raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("invalid boolean '{other}'"))),
    }
}
