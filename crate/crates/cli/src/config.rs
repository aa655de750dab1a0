//! Flat `key=value` run configuration: per-command defaults, then an
//! optional config file, then command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use sha2::{Digest, Sha256};

/// One recognised key. `default: None` marks a key that must be supplied.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: Some(default),
        help,
    }
}

pub const fn required(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: None,
        help,
    }
}

pub const SEED: KeySpec = required("seed", "root seed of every random stream");

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key=value, got {line:?}", i + 1))?;
        let k = k.trim().to_string();
        ensure!(!out.iter().any(|(o, _)| *o == k), "line {}: key {k} set twice", i + 1);
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(
        command: &str,
        specs: &[KeySpec],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> = specs
            .iter()
            .filter_map(|s| s.default.map(|d| (s.key.to_string(), d.to_string())))
            .collect();
        let known = |k: &str| specs.iter().any(|s| s.key == k);
        if let Some(path) = file {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            for (k, v) in parse_kv(&text).with_context(|| format!("in config {}", path.display()))? {
                ensure!(known(&k), "unknown config key {k:?} for {command}");
                values.insert(k, v);
            }
        }
        for (k, v) in overrides {
            ensure!(known(k), "unknown config key {k:?} for {command}");
            values.insert(k.clone(), v.clone());
        }
        for s in specs {
            ensure!(
                values.contains_key(s.key),
                "missing required key {:?} ({})",
                s.key,
                s.help
            );
        }
        Ok(Self {
            command: command.into(),
            values,
        })
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.str(key);
        v.parse().map_err(|e| anyhow::anyhow!("config {key}={v:?}: {e}"))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => bail!("config {key}={v:?}: expected true or false"),
        }
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).with_context(|| format!("config {key} must name a file"))
    }

    /// Comma-separated list; empty value gives an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow::anyhow!("config {key}: item {s:?}: {e}")))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n", self.command);
        for (k, v) in &self.values {
            s += &format!("{k}={v}\n");
        }
        s
    }

    /// First 12 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPECS: &[KeySpec] = &[SEED, key("epochs", "600", ""), key("path", "", "")];

    #[test]
    fn precedence_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        std::fs::write(&f, "# x\nepochs = 50\nseed=3\n").unwrap();
        let c = RunConfig::resolve("t", SPECS, Some(&f), &[("epochs".into(), "7".into())]).unwrap();
        assert_eq!((c.get::<usize>("epochs").unwrap(), c.seed().unwrap()), (7, 3));
        assert_eq!(c.path("path"), None);
        assert!(RunConfig::resolve("t", SPECS, None, &[]).is_err());
        assert!(RunConfig::resolve(
            "t",
            SPECS,
            None,
            &[("bogus".into(), "1".into()), ("seed".into(), "1".into())]
        )
        .is_err());
        std::fs::write(&f, "seed=1\nseed=2\n").unwrap();
        assert!(RunConfig::resolve("t", SPECS, Some(&f), &[]).is_err());
        let a = RunConfig::resolve("t", SPECS, None, &[("seed".into(), "1".into())]).unwrap();
        let b = RunConfig::resolve("t", SPECS, None, &[("seed".into(), "2".into())]).unwrap();
        assert_ne!(a.hash(), b.hash());
        let again = RunConfig::resolve("t", SPECS, None, &parse_kv(&a.to_text()).unwrap()).unwrap();
        assert_eq!(again, a);
    }
}
