//! Line-based `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are unique; every key must be
//! consumed by some reader, so typos surface as errors instead of silently
//! falling back to defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("{source}:{lineno}"), "expected `key = value`"))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::format(format!("{source}:{lineno}"), "empty key"));
            }
            if entries.insert(key.clone(), (value.trim().to_string(), lineno)).is_some() {
                return Err(Error::format(format!("{source}:{lineno}"), format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
            used: RefCell::default(),
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((value, lineno)) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.to_string());
        value
            .parse()
            .map(Some)
            .map_err(|e| Error::format(key, format!("{}:{lineno}: `{value}`: {e}", self.source)))
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody asked for.
    pub fn ensure_consumed(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((key, (_, lineno))) => Err(Error::format(
                key.as_str(),
                format!("{}:{lineno}: unknown key", self.source),
            )),
            None => Ok(()),
        }
    }
}
