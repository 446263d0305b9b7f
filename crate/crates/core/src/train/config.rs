//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are consumed by typed getters and any key left unread is an error,
//! so typos never pass silently.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl FromStr for KvConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if cfg.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(cfg)
    }
}

impl KvConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?.parse()
    }

    /// Applies a `key=value` override, replacing any existing value.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.entries.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    /// Like [`take`](Self::take) but writes into `slot` when present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors when any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.into_keys().collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let mut c: KvConfig = "# header\nsteps = 300\n\nlr=1e-3 # trailing\n".parse().unwrap();
        assert_eq!(c.take::<usize>("steps").unwrap(), Some(300));
        let mut lr = 0.0;
        c.take_into("lr", &mut lr).unwrap();
        assert_eq!(lr, 1e-3);
        c.finish().unwrap();
    }

    #[test]
    fn rejects_bad_lines() {
        assert!("steps 300".parse::<KvConfig>().is_err());
        assert!("a = 1\na = 2".parse::<KvConfig>().is_err());
        assert!(" = 2".parse::<KvConfig>().is_err());
        let mut c: KvConfig = "steps = many".parse().unwrap();
        assert!(c.take::<usize>("steps").is_err());
    }

    #[test]
    fn unknown_keys_reported() {
        let c: KvConfig = "stepz = 3".parse().unwrap();
        let err = c.finish().unwrap_err().to_string();
        assert!(err.contains("stepz"));
    }

    #[test]
    fn overrides_replace() {
        let mut c: KvConfig = "seed = 1".parse().unwrap();
        c.set_override("seed=9").unwrap();
        assert_eq!(c.take::<u64>("seed").unwrap(), Some(9));
        assert!(c.set_override("seed").is_err());
    }
}
