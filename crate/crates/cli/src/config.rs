//! Settings resolved from flags, then a `key=value` config file, then
//! defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

/// Keys a manifest carries that are not settings.
fn is_manifest_only(key: &str) -> bool {
    key == "command" || key == "tool_version" || key.contains('.')
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("config line {}: expected key=value, got `{line}`", n + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
            }
            if !is_manifest_only(k) {
                values.insert(k.to_string(), v.trim().to_string());
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Resolves settings and remembers every resolved value for the manifest.
#[derive(Debug, Default)]
pub struct Settings {
    config: ConfigFile,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(config: ConfigFile) -> Self {
        Settings {
            config,
            resolved: BTreeMap::new(),
        }
    }

    fn raw<'a>(&'a self, key: &str, flag: Option<&'a str>) -> Option<&'a str> {
        flag.or_else(|| self.config.get(key))
    }

    fn parse<T: FromStr>(key: &str, s: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        s.parse::<T>()
            .map_err(|e| CliError::Usage(format!("invalid value `{s}` for {key}: {e}")))
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<&str>, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        let v = match self.raw(key, flag) {
            Some(s) => Self::parse(key, s)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str, flag: Option<&str>) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key, flag) {
            Some(s) => {
                let v: T = Self::parse(key, s)?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// A float given as a decimal or as a fraction like `2/255`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Number(pub f64);

impl FromStr for Number {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("`{s}` is not a number");
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                a / b
            }
            None => s.trim().parse().map_err(|_| bad())?,
        };
        if v.is_finite() {
            Ok(Number(v))
        } else {
            Err(bad())
        }
    }
}

impl Display for Number {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
