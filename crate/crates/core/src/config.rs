//! Plain-text `key = value` configuration.
//!
//! One assignment per line; `#` starts a comment; keys are dotted
//! (`model.max_depth`, `train.base_lr`, ...). Each section type knows its own
//! keys and rejects anything else.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A group of settings addressable by key.
pub trait ConfigSection {
    /// Assigns one key (without the section prefix).
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()>;
}

/// Parses `key = value` lines; rejects lines without `=` and duplicate keys.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1)));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::config(format!("{origin}:{}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::config(format!("{origin}:{}: duplicate key `{k}`", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Parses a scalar, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("invalid value `{value}` for `{key}`: {e}")))
}

/// Parses a comma-separated list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn format_list<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn unknown_key(section: &str, key: &str) -> Error {
    Error::config(format!("unknown configuration key `{section}.{key}`"))
}

/// Renders sections as `prefix.key = value` lines.
pub fn render(sections: &[(&str, &dyn ConfigSection)]) -> String {
    let mut out = String::new();
    for (prefix, section) in sections {
        for (k, v) in section.entries() {
            out.push_str(&format!("{prefix}.{k} = {v}\n"));
        }
    }
    out
}
