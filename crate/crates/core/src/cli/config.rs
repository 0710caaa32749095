//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Keys before the first header belong to the `global` section, which every
//! command falls back to.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const GLOBAL: &str = "global";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = GLOBAL.to_string();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                if current.is_empty() {
                    return Err(Error::config(format!("config line {}: empty section name", n + 1)));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                return Err(Error::config(format!("config line {}: empty key", n + 1)));
            }
            let section = sections.entry(current.clone()).or_default();
            if section.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("config line {}: duplicate key '{key}' in [{current}]", n + 1)));
            }
        }
        Ok(ConfigFile { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .or_else(|| self.sections.get(GLOBAL).and_then(|s| s.get(key)))
            .map(String::as_str)
    }

    /// Rejects keys in `section` that are not in `allowed`.
    pub fn check_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        if let Some(s) = self.sections.get(section) {
            if let Some(k) = s.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(Error::config(format!("[{section}]: unknown key '{k}'")));
            }
        }
        Ok(())
    }
}

/// Looks up values for one command: explicit flags win over the file.
pub struct Resolver<'a> {
    pub file: Option<&'a ConfigFile>,
    pub section: &'static str,
}

impl Resolver<'_> {
    pub fn get<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.and_then(|f| f.get(self.section, key)) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("{key}: cannot parse '{raw}': {e}"))),
        }
    }

    pub fn or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    pub fn required<T>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(flag, key)?
            .ok_or_else(|| Error::config(format!("{key}: required (flag --{} or config key)", key.replace('_', "-"))))
    }

    /// A list flag, or a comma-separated value from the file.
    pub fn list<T>(&self, flag: Vec<T>, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if !flag.is_empty() {
            return Ok(flag);
        }
        match self.file.and_then(|f| f.get(self.section, key)) {
            None => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::config(format!("{key}: cannot parse '{s}': {e}"))))
                .collect(),
        }
    }
}

/// Three numbers written as `a,b,c`, `axbxc` or a single value for all three.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple<T>(pub [T; 3]);

impl<T: FromStr + Copy> FromStr for Triple<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
        let parse = |p: &str| p.parse::<T>().map_err(|e| format!("'{p}': {e}"));
        match parts.as_slice() {
            [one] => {
                let v = parse(one)?;
                Ok(Triple([v; 3]))
            }
            [a, b, c] => Ok(Triple([parse(a)?, parse(b)?, parse(c)?])),
            _ => Err(format!("expected 1 or 3 values, got '{s}'")),
        }
    }
}
