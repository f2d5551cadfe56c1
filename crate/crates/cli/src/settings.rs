use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Flat `key=value` configuration merged under command-line flags.
///
/// Every value is recorded as it resolves, and keys read from the file but
/// never consumed make [`Settings::finish`] fail.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config key `{}` given twice", k.trim())));
        }
    }
    Ok(map)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings { file, resolved: Vec::new() })
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn take<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let v = self.take_opt(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    /// Like [`Settings::take`] without a default; unset keys are not recorded.
    pub fn take_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let from_file = self.file.remove(key);
        let v = match (flag, from_file) {
            (Some(v), _) => Some(v),
            (None, Some(text)) => {
                Some(text.parse().map_err(|e| CliError::Usage(format!("config {key}={text}: {e}")))?)
            }
            (None, None) => None,
        };
        if let Some(v) = &v {
            if !self.resolved.iter().any(|(k, _)| k == key) {
                self.record(key, v);
            }
        }
        Ok(v)
    }

    fn record(&mut self, key: &str, v: &impl fmt::Display) {
        let text = v.to_string();
        match self.resolved.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = text,
            None => self.resolved.push((key.to_string(), text)),
        }
    }

    /// Records a value that was resolved elsewhere.
    pub fn set_resolved(&mut self, key: &str, value: impl fmt::Display) {
        self.record(key, &value);
    }

    /// Removes and returns every file key not yet consumed.
    pub fn drain_file(&mut self) -> BTreeMap<String, String> {
        std::mem::take(&mut self.file)
    }

    pub fn finish(self) -> Result<Vec<(String, String)>, CliError> {
        if let Some(k) = self.file.keys().next() {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        Ok(self.resolved)
    }
}

/// Comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<T>().map_err(|e| format!("`{t}`: {e}")))
            .collect::<Result<Vec<T>, String>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

/// Non-negative integer that also accepts `1e7`-style literals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Count(pub u64);

impl FromStr for Count {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Ok(v) = s.parse::<u64>() {
            return Ok(Count(v));
        }
        match s.parse::<f64>() {
            Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 1.8e19 => Ok(Count(x as u64)),
            _ => Err(format!("`{s}` is not a non-negative integer")),
        }
    }
}

impl fmt::Display for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Count {
    pub fn usize(self) -> usize {
        self.0 as usize
    }
}

/// `;`-separated distribution strings, since a single one already uses commas.
#[derive(Debug, Clone, PartialEq)]
pub struct DistList(pub Vec<tailcast::TailDistribution>);

impl FromStr for DistList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|e| format!("`{t}`: {e}")))
            .collect::<Result<Vec<_>, String>>()?;
        if items.is_empty() {
            return Err("empty distribution list".into());
        }
        Ok(DistList(items))
    }
}

impl fmt::Display for DistList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}
