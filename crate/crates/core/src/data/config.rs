//! `key = value` text files. `#` starts a comment; blank lines are ignored.

use std::path::Path;

use crate::error::{DanError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DanError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(err(format!("duplicate key {key}")));
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Typed access to one entry, with errors pointing at its line.
pub struct Field<'a> {
    pub entry: &'a Entry,
    pub path: &'a Path,
}

impl Field<'_> {
    pub fn error(&self, msg: impl Into<String>) -> DanError {
        DanError::Parse {
            path: self.path.to_path_buf(),
            line: self.entry.line,
            msg: format!("{}: {}", self.entry.key, msg.into()),
        }
    }

    pub fn parse<T: std::str::FromStr>(&self) -> Result<T> {
        self.entry
            .value
            .parse()
            .map_err(|_| self.error(format!("cannot parse {:?}", self.entry.value)))
    }

    pub fn list<T: std::str::FromStr>(&self) -> Result<Vec<T>> {
        if self.entry.value.is_empty() {
            return Ok(Vec::new());
        }
        self.entry
            .value
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| self.error(format!("bad list item {s:?}"))))
            .collect()
    }

    pub fn bool(&self) -> Result<bool> {
        match self.entry.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(self.error(format!("expected a boolean, found {v:?}"))),
        }
    }
}
