//! Flat `key = value` settings files with typed lookups.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments win,
//! so command-line overrides are applied by setting keys after loading.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", i + 1))?;
            let k = k.trim();
            if k.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow!("{key} = {v:?}: {e}")),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Keys that are not in `known`.
    pub fn unknown_keys(&self, known: &[&str]) -> Vec<String> {
        self.values.keys().filter(|k| !known.contains(&k.as_str())).cloned().collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut s = Settings::parse("# run\nepochs = 5\n\nlr=0.1\n").unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), Some(5));
        s.apply_overrides(&["epochs=7".into()]).unwrap();
        assert_eq!(s.get_or("epochs", 0usize).unwrap(), 7);
        assert_eq!(s.get_or("missing", 3.5f64).unwrap(), 3.5);
        assert!(s.get::<usize>("lr").is_err());
        assert_eq!(s.unknown_keys(&["epochs"]), vec!["lr".to_string()]);
        assert!(Settings::parse("novalue").is_err());
    }
}
