//! `key = value` text configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Keys a
//! consumer does not recognise are errors.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `(key, value, line)` triples in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    pub entries: Vec<(String, String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found {raw:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.push((k.to_string(), v.trim().to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// A configuration struct settable one key at a time.
pub trait KvConfig {
    /// Applies one pair; returns `Ok(false)` when the key is not known.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    fn pairs(&self) -> Vec<(String, String)>;

    /// Applies every entry, rejecting unknown keys.
    fn apply_all<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in entries {
            if !self.set(k, v)? {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub fn format_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Formats an `f64` so that parsing it back yields the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_line_numbers() {
        let f = KvFile::parse("# header\nepochs = 3\n\n lr=0.1 # inline\n", Path::new("c.cfg")).unwrap();
        assert_eq!(
            f.entries,
            vec![("epochs".into(), "3".into(), 2), ("lr".into(), "0.1".into(), 4)]
        );
        match KvFile::parse("a = 1\nbroken\n", Path::new("c.cfg")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1e-5, 1.0 / 3.0, 2.0] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
