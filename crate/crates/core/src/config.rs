//! Flat `key = value` configuration files with an `include` directive.
//!
//! Blank lines and lines starting with `#` are ignored. `include = other.conf`
//! splices another file (resolved relative to the including file) at that
//! point; later assignments override earlier ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

const MAX_INCLUDE_DEPTH: usize = 16;

pub fn parse_str(text: &str, origin: &Path, out: &mut KvMap) -> Result<()> {
    parse_inner(text, origin, out, 0)
}

fn parse_inner(text: &str, origin: &Path, out: &mut KvMap, depth: usize) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "include" {
            if depth >= MAX_INCLUDE_DEPTH {
                return Err(Error::Config(format!("include nesting too deep at {}", origin.display())));
            }
            let path = origin.parent().unwrap_or(Path::new(".")).join(v);
            let sub = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parse_inner(&sub, &path, out, depth + 1)?;
        } else {
            out.insert(k.to_string(), v.to_string());
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = KvMap::new();
    parse_str(&text, path, &mut out)?;
    Ok(out)
}

/// Loads several files in order into one map.
pub fn load_all(paths: &[PathBuf]) -> Result<KvMap> {
    let mut out = KvMap::new();
    for p in paths {
        out.extend(load(p)?);
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// A config struct settable from flat keys.
pub trait Configurable {
    /// Sets `key`; returns `Ok(false)` for keys this struct does not know.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every `(key, value)` in canonical form, for manifests and provenance.
    fn entries(&self) -> Vec<(String, String)>;

    /// Applies all keys, rejecting unknown ones.
    fn apply(&mut self, kv: &KvMap) -> Result<()> {
        for (k, v) in kv {
            if !self.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        Ok(())
    }

    /// Applies keys under `prefix.`, ignoring others.
    fn apply_prefixed(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        for (k, v) in kv {
            if let Some(rest) = k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                if !self.set(rest, v)? {
                    return Err(Error::Config(format!("unknown key {k}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn includes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("base.conf"), "epochs = 3\nbatch_size = 128\n").unwrap();
        fs::write(
            dir.path().join("desk.conf"),
            "# desk scale\ninclude = base.conf\nbatch_size = 8\n",
        )
        .unwrap();
        let kv = load(&dir.path().join("desk.conf")).unwrap();
        assert_eq!(kv["epochs"], "3");
        assert_eq!(kv["batch_size"], "8");
    }

    #[test]
    fn malformed_line_reports_position() {
        let mut kv = KvMap::new();
        let err = parse_str("a = 1\nnonsense\n", Path::new("x.conf"), &mut kv).unwrap_err();
        assert!(err.to_string().contains("x.conf:2"));
    }

    #[test]
    fn include_cycle_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.conf"), "include = a.conf\n").unwrap();
        assert!(load(&dir.path().join("a.conf")).is_err());
    }
}
