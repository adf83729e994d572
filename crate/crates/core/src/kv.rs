//! Flat `key = value` text files: one entry per line, `#` starts a comment.
//! Used for config snapshots, metrics, and dataset manifests.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry. Keys may repeat; lookups return the first match.
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        let key = key.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'));
        self.entries.push((key, value.to_string()));
        self
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Entries whose key starts with `prefix`, in file order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str, origin: &Path) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::malformed(origin, format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::malformed(origin, format!("bad value for `{key}`: {raw}")))
    }

    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut out = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::malformed(origin, format!("line {}: expected `key = value`", n + 1)))?;
            out.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn render(&self, header: &str) -> String {
        let mut s = String::new();
        for line in header.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn write(&self, path: &Path, header: &str) -> Result<()> {
        fs::write(path, self.render(header)).map_err(|e| Error::io(path, e))
    }
}
