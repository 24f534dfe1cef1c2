//! Flat `key = value` config files. Lines starting with `#` and blank lines
//! are skipped; unknown keys are rejected so typos surface as config errors.

use std::collections::BTreeMap;

use crate::error::{CmgError, Result};

#[derive(Debug)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CmgError::Parse {
                    offset: (lineno + 1) as u64,
                    message: format!("line {}: expected 'key = value', got '{line}'", lineno + 1),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(CmgError::Parse {
                    offset: (lineno + 1) as u64,
                    message: format!("line {}: empty key", lineno + 1),
                });
            }
            if entries.insert(key.clone(), (value, lineno + 1)).is_some() {
                return Err(CmgError::Config(format!("duplicate key '{key}'")));
            }
        }
        Ok(KvFile { entries, consumed: std::cell::RefCell::new(Vec::new()) })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().push(key.to_string());
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CmgError::Config(format!("key '{key}': '{v}' is not a count"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CmgError::Config(format!("key '{key}': '{v}' is not an integer"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CmgError::Config(format!("key '{key}': '{v}' is not a real"))),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn get_u64_list(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        CmgError::Config(format!("key '{key}': '{part}' is not an integer"))
                    })
                })
                .collect(),
        }
    }

    /// Errors on any key never requested by a getter.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (key, (_, line)) in &self.entries {
            if !consumed.iter().any(|c| c == key) {
                return Err(CmgError::Config(format!("unknown key '{key}' (line {line})")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_and_defaults() {
        let kv = KvFile::parse("# comment\na = 3\nb = 1.5\nname = soft\n").unwrap();
        assert_eq!(kv.get_usize("a", 0).unwrap(), 3);
        assert_eq!(kv.get_f64("b", 0.0).unwrap(), 1.5);
        assert_eq!(kv.get_str("name", "hard"), "soft");
        assert_eq!(kv.get_usize("missing", 9).unwrap(), 9);
        kv.reject_unknown().unwrap();
    }

    #[test]
    fn bad_line_reports_line_number() {
        match KvFile::parse("a = 1\nnot a kv line\n") {
            Err(CmgError::Parse { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_config_error() {
        let kv = KvFile::parse("a = 1\nmystery = 2\n").unwrap();
        let _ = kv.get_usize("a", 0).unwrap();
        assert!(matches!(kv.reject_unknown(), Err(CmgError::Config(_))));
    }

    #[test]
    fn seeds_list_parses() {
        let kv = KvFile::parse("seeds = 1, 2, 3\n").unwrap();
        assert_eq!(kv.get_u64_list("seeds", &[]).unwrap(), vec![1, 2, 3]);
    }
}
