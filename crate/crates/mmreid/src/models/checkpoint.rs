//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "MLRD"
//! version  u16
//! n_config u32, then per entry: key_len u32, key bytes, val_len u32, val bytes
//! n_tensor u32, then per tensor: name_len u32, name bytes,
//!                                ndim u8, dims u32 × ndim,
//!                                data f64 × prod(dims)
//! ```
//!
//! Entries are written in sorted name order, so save → load → save is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::params::ParamSet;

pub const MAGIC: [u8; 4] = *b"MLRD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u16,
    pub config: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn stage(&self) -> Option<&str> {
        self.config.get("stage").map(|s| s.as_str())
    }

    /// Parse a JSON-valued config entry, e.g. a model configuration struct.
    pub fn get_json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let raw = self
            .config
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing config entry {key}")))?;
        serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("config entry {key}: {e}")))
    }

    /// Fetch a tensor and verify its shape against the caller's config.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: &BTreeMap<String, String>,
    params: &ParamSet,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    for (k, v) in config {
        write_str(&mut buf, k);
        write_str(&mut buf, v);
    }
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        write_str(&mut buf, name);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n_config = r.u32()?;
    let mut config = BTreeMap::new();
    for _ in 0..n_config {
        let k = r.string()?;
        let v = r.string()?;
        config.insert(k, v);
    }
    let n_tensor = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..n_tensor {
        let name = r.string()?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params.insert(name, Tensor::from_vec(shape, data)?.trainable());
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        version,
        config,
        params,
    })
}

/// Store a serializable value as a JSON config entry.
pub fn config_set_json<T: serde::Serialize>(
    config: &mut BTreeMap<String, String>,
    key: &str,
    value: &T,
) -> Result<()> {
    config.insert(key.to_string(), serde_json::to_string(value)?);
    Ok(())
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string field".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (BTreeMap<String, String>, ParamSet) {
        let mut config = BTreeMap::new();
        config.insert("stage".to_string(), "reid".to_string());
        config.insert("d_v".to_string(), "64".to_string());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        params.insert_randn("enc.embed.w", vec![6, 4], 6, &mut rng);
        params.insert_zeros("enc.embed.b", vec![1, 4]);
        (config, params)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (config, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &config, &params).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.stage(), Some("reid"));
        save_checkpoint(&p2, &loaded.config, &loaded.params).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_reported() {
        let (config, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &config, &params).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_reported() {
        let (config, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &config, &params).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn shape_check_on_require() {
        let (config, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &config, &params).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert!(ck.require("enc.embed.w", &[6, 4]).is_ok());
        assert!(ck.require("enc.embed.w", &[4, 6]).is_err());
        assert!(ck.require("nope", &[1]).is_err());
    }
}
