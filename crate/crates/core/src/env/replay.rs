//! Line-oriented `key=value` episode files.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys are unique and keep their file order.

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    fields: IndexMap<String, String>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.fields.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("replay record is missing {key:?}")))
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Invalid(format!("replay field {key}={raw:?} is malformed")))
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.fields
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = IndexMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected key=value", n + 1)))?;
            if fields.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Invalid(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Record { fields })
    }
}

pub(crate) fn parse_pos(s: &str) -> Result<super::Pos> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| Error::Invalid(format!("bad position {s:?}")))?;
    let r = r.trim().parse().map_err(|_| Error::Invalid(format!("bad position {s:?}")))?;
    let c = c.trim().parse().map_err(|_| Error::Invalid(format!("bad position {s:?}")))?;
    Ok(super::Pos::new(r, c))
}
