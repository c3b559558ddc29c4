//! `key = value` run files. Blank lines and `#` comments are ignored; keys
//! may use `-` or `_`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use adnet_core::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    source: String,
}

impl ConfigFile {
    pub fn parse(text: &str, source: &str, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{source}:{}: unknown key {key:?} (allowed: {})",
                    i + 1,
                    allowed.join(", ")
                )));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("{source}:{}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(ConfigFile {
            values,
            source: source.to_string(),
        })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                ConfigFile::parse(&text, &p.display().to_string(), allowed)
            }
        }
    }

    /// Flag value if given, else the file's value, else `None`.
    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{}: bad value {v:?} for {key}", self.source))),
        }
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.get(flag, key)?
            .ok_or_else(|| Error::Config(format!("missing --{} (flag or config key {key})", key.replace('_', "-"))))
    }

    /// Boolean switches: a set flag wins, otherwise the file may enable it.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        Ok(self.get::<bool>(None, key)?.unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_errors() {
        let c = ConfigFile::parse("epochs = 7 # comment\n\nbatch-size=4\n", "f", &["epochs", "batch_size"]).unwrap();
        assert_eq!(c.get::<usize>(None, "epochs").unwrap(), Some(7));
        assert_eq!(c.get(Some(3usize), "epochs").unwrap(), Some(3));
        assert_eq!(c.get::<usize>(None, "batch_size").unwrap(), Some(4));
        assert!(c.get::<usize>(None, "missing").unwrap().is_none());
        assert!(ConfigFile::parse("nope = 1", "f", &["epochs"]).is_err());
        assert!(ConfigFile::parse("epochs", "f", &["epochs"]).is_err());
        assert!(ConfigFile::parse("epochs=1\nepochs=2", "f", &["epochs"]).is_err());
        let c = ConfigFile::parse("epochs = x", "f", &["epochs"]).unwrap();
        assert!(c.get::<usize>(None, "epochs").is_err());
    }
}
