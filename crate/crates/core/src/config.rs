//! Flat `key = value` text files used for model specs and training configs.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key{sep}value', got '{text}'")]
    Syntax { line: usize, sep: char, text: String },
    #[error("duplicate key '{0}'")]
    Duplicate(String),
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("missing key '{0}'")]
    Missing(String),
    #[error("key '{key}': cannot parse '{value}': {reason}")]
    Value { key: String, value: String, reason: String },
}

/// Ordered key/value pairs. `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, sep: char) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once(sep) else {
                return Err(ConfigError::Syntax { line: i + 1, sep, text: line.to_string() });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, sep, text: line.to_string() });
            }
            if kv.raw(k).is_some() {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            kv.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|item| {
                item.trim().parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }

    pub fn render(&self, sep: &str) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}{sep}{v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# c\n depths = 3, 3,9 \nlr=4e-3\n\n", '=').unwrap();
        assert_eq!(kv.get_list::<usize>("depths").unwrap(), Some(vec![3, 3, 9]));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(4e-3));
        assert_eq!(kv.get::<f64>("absent").unwrap(), None);
        assert!(matches!(kv.require::<f64>("absent"), Err(ConfigError::Missing(_))));
    }

    #[test]
    fn errors() {
        assert!(matches!(KeyValues::parse("novalue\n", '='), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(KeyValues::parse("a=1\na=2", '='), Err(ConfigError::Duplicate(_))));
        let kv = KeyValues::parse("a=x", '=').unwrap();
        assert!(matches!(kv.get::<u32>("a"), Err(ConfigError::Value { .. })));
        assert!(matches!(kv.reject_unknown(&["b"]), Err(ConfigError::UnknownKey(_))));
    }
}
