//! Flat key=value run configuration with section prefixes
//! (e.g. `train.epochs=20`). Unknown keys are rejected against each
//! command's schema, and every run writes its resolved configuration next
//! to its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RunConfig { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply `--override key=value` pairs (repeatable flag).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not key=value")));
            };
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Reject keys outside the command's schema, listing the offenders.
    pub fn validate_keys(&self, allowed: &[&str]) -> Result<()> {
        let bad: Vec<&str> = self
            .map
            .keys()
            .map(|k| k.as_str())
            .filter(|k| !allowed.contains(k))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}; allowed: {}",
                bad.join(", "),
                allowed.join(", ")
            )));
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get_str(key).unwrap_or(default)
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get_str(key)
            .ok_or_else(|| Error::Config(format!("missing required config key {key}")))
    }

    fn parse_with<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key {key}={v:?} has the wrong type"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse_with::<usize>(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse_with::<u64>(key)?.unwrap_or(default))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse_with::<f64>(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.parse_with::<bool>(key)?.unwrap_or(default))
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("config key {key}: bad list entry {s:?}"))
                    })
                })
                .collect(),
        }
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!("config key {key}: bad list entry {s:?}"))
                    })
                })
                .collect(),
        }
    }

    pub fn str_list_or(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.map.get(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        }
    }

    /// Serialized resolved configuration, sorted by key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_comments_and_overrides() {
        let mut cfg = RunConfig::parse("# hello\nvae.levels = 2\ntrain.lr=1e-4 # inline\n\n").unwrap();
        assert_eq!(cfg.get_str("vae.levels"), Some("2"));
        assert_eq!(cfg.f64_or("train.lr", 0.0).unwrap(), 1e-4);
        cfg.apply_overrides(&["train.lr=5e-4".to_string()]).unwrap();
        assert_eq!(cfg.f64_or("train.lr", 0.0).unwrap(), 5e-4);
        assert!(cfg.apply_overrides(&["oops".to_string()]).is_err());
    }

    #[test]
    fn unknown_keys_listed() {
        let cfg = RunConfig::parse("a.x=1\nb.y=2\n").unwrap();
        let err = cfg.validate_keys(&["a.x"]).unwrap_err();
        assert!(err.to_string().contains("b.y"), "{err}");
    }

    #[test]
    fn typed_accessors_reject_bad_values() {
        let cfg = RunConfig::parse("n=abc\n").unwrap();
        assert!(cfg.usize_or("n", 1).is_err());
        assert_eq!(cfg.usize_or("missing", 7).unwrap(), 7);
    }

    #[test]
    fn resolved_text_is_sorted_and_stable() {
        let cfg = RunConfig::parse("b=2\na=1\n").unwrap();
        assert_eq!(cfg.to_text(), "a=1\nb=2\n");
    }
}
