//! Flat `key=value` configuration text.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Keys are lowercase ASCII letters, digits and underscores, and may appear
//! only once. Lists are comma-separated. [`KeyValues::to_text`] writes keys
//! in sorted order, which makes the text canonical.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Result, SrnrError};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SrnrError::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(SrnrError::Config(format!("line {}: invalid key {key:?}", n + 1)));
            }
            if kv.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(SrnrError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        debug_assert!(valid_key(key), "invalid key {key:?}");
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let text = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.set(key, text);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| SrnrError::Config(format!("key {key}: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        let item = item.trim();
                        item.parse::<T>().map_err(|e| {
                            SrnrError::Config(format!("key {key}: cannot parse item {item:?}: {e}"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(SrnrError::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `a,b,c` into three values.
pub fn parse_triple<T: FromStr + Copy>(text: &str) -> Result<[T; 3]>
where
    T::Err: Display,
{
    let parts = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| SrnrError::Config(format!("cannot parse {p:?} in {text:?}: {e}")))
        })
        .collect::<Result<Vec<T>>>()?;
    match parts.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(SrnrError::Config(format!("expected three comma-separated values, got {text:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_canonical_text() {
        let kv = KeyValues::parse("# comment\n\n width = 16\nsigma_levels=0, 0.4,1.6\nname=a=b\n").unwrap();
        assert_eq!(kv.get::<usize>("width").unwrap(), Some(16));
        assert_eq!(kv.get_list::<f64>("sigma_levels").unwrap(), Some(vec![0.0, 0.4, 1.6]));
        assert_eq!(kv.raw("name"), Some("a=b"));
        assert_eq!(kv.get::<u64>("missing").unwrap(), None);
        assert_eq!(kv.to_text(), "name=a=b\nsigma_levels=0, 0.4,1.6\nwidth=16\n");
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
        assert_eq!(kv.hash().len(), 64);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(KeyValues::parse("width 16"), Err(SrnrError::Config(_))));
        assert!(matches!(KeyValues::parse("Width=16"), Err(SrnrError::Config(_))));
        assert!(matches!(KeyValues::parse("a=1\na=2"), Err(SrnrError::Config(_))));
        let kv = KeyValues::parse("width=sixteen").unwrap();
        assert!(kv.get::<usize>("width").is_err());
        assert!(kv.check_known(&["depth"]).is_err());
        assert!(kv.check_known(&["width"]).is_ok());
    }

    #[test]
    fn triples_and_hash() {
        assert_eq!(parse_triple::<usize>("64, 64,60").unwrap(), [64, 64, 60]);
        assert!(parse_triple::<usize>("64,64").is_err());
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
