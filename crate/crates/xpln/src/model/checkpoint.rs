//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"XPLN"
//! u32    format version (currently 1)
//! u32    config length in bytes, then that many bytes of UTF-8 `key=value` lines
//! u32    tensor count
//! per tensor:
//!   u32      name length, then the name in UTF-8
//!   u32      rank
//!   u64 * r  extents
//!   f32 * n  values, row-major
//! ```
//!
//! Writes are fully deterministic (fixed key and tensor order), so saving the
//! same parameters twice yields byte-identical files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"XPLN";
const VERSION: u32 = 1;

/// Raw archive contents: ordered config lines and named tensors.
pub(crate) struct Archive {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Archive {
    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub(crate) fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let mut config = String::new();
    for (k, v) in &archive.config {
        config.push_str(k);
        config.push('=');
        config.push_str(v);
        config.push('\n');
    }
    w.write_all(&(config.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(config.as_bytes()).map_err(io)?;
    w.write_all(&(archive.tensors.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (name, shape, data) in &archive.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub(crate) fn read_archive(path: &Path) -> Result<Archive> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a parameter archive (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported archive version {} (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let config_len = read_u32(&mut r, path)? as usize;
    let mut config_raw = vec![0u8; config_len];
    read_exact(&mut r, &mut config_raw, path)?;
    let config_text = String::from_utf8(config_raw).map_err(|_| {
        Error::Format(format!("{}: config block is not UTF-8", path.display()))
    })?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("{}: malformed config line {line:?}", path.display()))
        })?;
        config.push((k.to_string(), v.to_string()));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_raw = vec![0u8; name_len];
        read_exact(&mut r, &mut name_raw, path)?;
        let name = String::from_utf8(name_raw).map_err(|_| {
            Error::Format(format!("{}: tensor name is not UTF-8", path.display()))
        })?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = read_u64(&mut r, path)? as usize;
            numel = numel.checked_mul(e).filter(|&n| n <= 1 << 31).ok_or_else(|| {
                Error::Format(format!(
                    "{}: tensor {name} has an implausible extent table",
                    path.display()
                ))
            })?;
            shape.push(e);
        }
        let mut buf = vec![0u8; numel * 4];
        read_exact(&mut r, &mut buf, path)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok(Archive { config, tensors })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: archive truncated", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn config_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    let widths = cfg
        .encoder_widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("maps".into(), cfg.maps.to_string()),
        ("labels".into(), cfg.labels.to_string()),
        ("input_h".into(), cfg.input.0.to_string()),
        ("input_w".into(), cfg.input.1.to_string()),
        ("in_channels".into(), cfg.in_channels.to_string()),
        ("encoder_widths".into(), widths),
        ("decoder_width".into(), cfg.decoder_width.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ]
}

pub(crate) fn config_from_archive(archive: &Archive, path: &Path) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&str> {
        archive.lookup(key).ok_or_else(|| {
            Error::Format(format!("{}: config key {key} missing", path.display()))
        })
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| {
            Error::Format(format!("{}: config key {key} is not an integer", path.display()))
        })
    };
    let widths = get("encoder_widths")?
        .split(',')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| {
            Error::Format(format!("{}: malformed encoder_widths", path.display()))
        })?;
    let cutoffs = match archive.lookup("cutoffs") {
        None => None,
        Some(text) => Some(
            text.split(',')
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    Error::Format(format!("{}: malformed cutoffs", path.display()))
                })?,
        ),
    };
    let cfg = ModelConfig {
        maps: parse_usize("maps")?,
        labels: parse_usize("labels")?,
        input: (parse_usize("input_h")?, parse_usize("input_w")?),
        in_channels: parse_usize("in_channels")?,
        encoder_widths: widths,
        decoder_width: parse_usize("decoder_width")?,
        seed: get("seed")?.parse().map_err(|_| {
            Error::Format(format!("{}: malformed seed", path.display()))
        })?,
    };
    cfg.validate()?;
    let _ = cutoffs; // picked up separately by the params loader
    Ok(cfg)
}

impl<S: Scalar> ModelParams<S> {
    /// Write all parameters (and decision cutoffs, if set) to `path`.
    /// Values are stored as 32-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = config_entries(self.config());
        if let Some(cut) = &self.cutoffs {
            let text = cut
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            config.push(("cutoffs".into(), text));
        }
        let tensors = self
            .leaves()
            .into_iter()
            .map(|(name, t)| {
                let data = t.data().iter().map(|&v| v.to_f64() as f32).collect();
                (name, t.shape().to_vec(), data)
            })
            .collect();
        write_archive(path, &Archive { config, tensors })
    }

    /// Load parameters saved by [`ModelParams::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let cfg = config_from_archive(&archive, path)?;
        let mut params = ModelParams::<S>::init(&cfg)?;
        params.load_tensors(&archive, path)?;
        if let Some(text) = archive.lookup("cutoffs") {
            let cutoffs = text
                .split(',')
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("{}: malformed cutoffs", path.display())))?;
            if cutoffs.len() != cfg.labels {
                return Err(Error::Format(format!(
                    "{}: {} cutoffs for {} labels",
                    path.display(),
                    cutoffs.len(),
                    cfg.labels
                )));
            }
            params.cutoffs = Some(cutoffs);
        }
        Ok(params)
    }

    /// Fill parameter tensors from an archive's tensor table.
    pub(crate) fn load_tensors(&mut self, archive: &Archive, path: &Path) -> Result<()> {
        let stored: HashMap<&str, (&Vec<usize>, &Vec<f32>)> = archive
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let expected = self.leaves();
        let mut values = Vec::with_capacity(expected.len());
        for (name, t) in &expected {
            let (shape, data) = stored.get(name.as_str()).ok_or_else(|| {
                Error::Format(format!("{}: tensor {name} missing", path.display()))
            })?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "{}: tensor {name} has shape {:?}, expected {:?}",
                    path.display(),
                    shape,
                    t.shape()
                )));
            }
            let cast: Vec<S> = data.iter().map(|&v| S::from_f64(v as f64)).collect();
            values.push(Tensor::leaf(shape, cast)?);
        }
        self.set_leaves(values)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            maps: 3,
            labels: 2,
            input: (16, 16),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 11,
        };
        let mut params = ModelParams::<f32>::init(&cfg).unwrap();
        params.cutoffs = Some(vec![0.5, 0.3141592653589793]);
        let a = dir.path().join("a.xpln");
        let b = dir.path().join("b.xpln");
        params.save(&a).unwrap();
        let loaded = ModelParams::<f32>::load(&a).unwrap();
        loaded.save(&b).unwrap();
        let ba = std::fs::read(&a).unwrap();
        let bb = std::fs::read(&b).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(loaded.config(), &cfg);
        assert_eq!(loaded.cutoffs, params.cutoffs);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.xpln");
        std::fs::write(&p, b"PNG\x00whatever").unwrap();
        match ModelParams::<f32>::load(&p) {
            Err(crate::Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            maps: 2,
            labels: 1,
            input: (8, 8),
            in_channels: 1,
            encoder_widths: vec![4],
            decoder_width: 4,
            seed: 3,
        };
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let p = dir.path().join("full.xpln");
        params.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let q = dir.path().join("cut.xpln");
        std::fs::write(&q, &bytes[..bytes.len() / 2]).unwrap();
        match ModelParams::<f32>::load(&q) {
            Err(crate::Error::Format(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_identical_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            maps: 4,
            labels: 3,
            input: (16, 16),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 21,
        };
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let p = dir.path().join("m.xpln");
        params.save(&p).unwrap();
        let loaded = ModelParams::<f32>::load(&p).unwrap();
        let img = Tensor::leaf(
            &[1, 16, 16],
            (0..256).map(|i| 0.5 + 0.3 * (i as f32 * 0.7).sin()).collect(),
        )
        .unwrap();
        let a = params.forward_segment(&img).unwrap();
        let b = loaded.forward_segment(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
