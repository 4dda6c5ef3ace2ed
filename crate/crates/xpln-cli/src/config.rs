//! Flat `key=value` run configuration with `#` comments. Commands take the
//! keys they understand; anything left over is a hard error, so typos in a
//! config file never silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use xpln::error::{Error, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key {key}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Remove and parse one key; absent keys leave the default in place.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {raw:?}"))
            })?;
        }
        Ok(())
    }

    /// Comma-separated list variant of [`take`](Self::take).
    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        Error::Config(format!("config key {key}: cannot parse {part:?}"))
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Every key must have been consumed by now.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            Err(Error::Config(format!("unknown config keys: {}", keys.join(", "))))
        }
    }
}

/// A `channel=word` file mapping map numbers to display keywords.
pub fn load_keywords(path: &Path) -> Result<BTreeMap<usize, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (channel, word) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected channel=keyword",
                path.display(),
                lineno + 1
            ))
        })?;
        let channel: usize = channel.trim().parse().map_err(|_| {
            Error::Config(format!(
                "{}:{}: channel must be a map number",
                path.display(),
                lineno + 1
            ))
        })?;
        out.insert(channel, word.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let path = dir.join("run.cfg");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn parses_comments_whitespace_and_types() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "# a comment\n  epochs = 12  # trailing\n\nlr=0.5\nwidths=4, 8,16\n",
        );
        let mut cfg = FileConfig::load(&path).unwrap();
        let mut epochs = 1usize;
        let mut lr = 0.0f64;
        let mut widths = vec![1usize];
        cfg.take("epochs", &mut epochs).unwrap();
        cfg.take("lr", &mut lr).unwrap();
        cfg.take_list("widths", &mut widths).unwrap();
        cfg.finish().unwrap();
        assert_eq!(epochs, 12);
        assert_eq!(lr, 0.5);
        assert_eq!(widths, vec![4, 8, 16]);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FileConfig::load(&write(dir.path(), "mystery=1\n")).unwrap();
        let err = cfg.finish().unwrap_err();
        assert!(err.to_string().contains("mystery"));

        assert!(FileConfig::load(&write(dir.path(), "a=1\na=2\n")).is_err());
        assert!(FileConfig::load(&write(dir.path(), "just a line\n")).is_err());

        let mut cfg = FileConfig::load(&write(dir.path(), "epochs=soon\n")).unwrap();
        let mut epochs = 1usize;
        assert!(cfg.take("epochs", &mut epochs).is_err());
    }

    #[test]
    fn keyword_files_map_channels_to_words() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kw.cfg");
        std::fs::write(&path, "5=microaneurysm\n3 = hemorrhage # dark\n").unwrap();
        let kw = load_keywords(&path).unwrap();
        assert_eq!(kw.get(&5).unwrap(), "microaneurysm");
        assert_eq!(kw.get(&3).unwrap(), "hemorrhage");
        std::fs::write(&path, "x=word\n").unwrap();
        assert!(load_keywords(&path).is_err());
    }
}
