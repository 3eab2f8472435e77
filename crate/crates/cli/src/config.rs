//! `key=value` configuration files. Flags given on the command line win.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Parses `key=value` lines. Blank lines and lines starting with `#` are
    /// ignored; keys may use `-` or `_` interchangeably.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
            values.insert(normalize_key(k.trim()), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize_key(key)).map(String::as_str)
    }

    /// `flag`, else the config value for `key`, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get_str(key) {
            Some(s) => s
                .parse()
                .map_err(|e| CliError::Usage(format!("config key `{key}` = `{s}`: {e}"))),
            None => Ok(default),
        }
    }

    /// Like [`ConfigFile::resolve`] with no default.
    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.get_str(key)
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Usage(format!("config key `{key}` = `{s}`: {e}")))
            })
            .transpose()
    }

    /// Entries whose key starts with `w_`, used for loss weights.
    pub fn weights(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with("w_"))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}
