//! Versioned tensor archives: magic, version, JSON header, raw f64 LE payload.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{GaiaError, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"GAIACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An archive of named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: ParamSet::new() }
    }

    /// Adds every tensor of `set` under `namespace/`.
    pub fn put(&mut self, namespace: &str, set: &ParamSet) {
        for (k, v) in set.iter() {
            self.tensors.insert(format!("{namespace}/{k}"), v.clone());
        }
    }

    /// Tensors stored under `namespace/`, with the prefix removed.
    pub fn take(&self, namespace: &str) -> ParamSet {
        let prefix = format!("{namespace}/");
        let mut out = ParamSet::new();
        for (k, v) in self.tensors.iter() {
            if let Some(rest) = k.strip_prefix(&prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| GaiaError::Format(format!("checkpoint metadata lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(name) = self.tensors.first_non_finite() {
            return Err(GaiaError::NonFinite(format!("refusing to save non-finite tensor {name}")));
        }
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, m) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * m.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for (_, m) in self.tensors.iter() {
                for v in m.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| GaiaError::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let payload = &bytes[body..];
        let mut tensors = ParamSet::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(bad(&format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(bad(&format!("{}: payload truncated", e.name)));
            }
            let vals: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((e.shape[0], e.shape[1]), vals).map_err(|x| bad(&x.to_string()))?;
            tensors.insert(e.name.clone(), m);
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut set = ParamSet::new();
        set.insert("x.w", Mat::from_shape_fn((3, 2), |(r, c)| r as f64 * 0.1 - c as f64 / 3.0));
        set.insert("y", Mat::zeros((1, 5)));
        let mut ck = Checkpoint::new("pretrain", serde_json::json!({"epoch": 3}));
        ck.put("student", &set);
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.take("student"), set);
        assert_eq!(back.meta_field::<u32>("epoch").unwrap(), 3);

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(GaiaError::Format(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let mut ck = Checkpoint::new("x", serde_json::Value::Null);
        ck.tensors.insert("bad", Mat::from_elem((1, 1), f64::NAN));
        let dir = tempfile::tempdir().unwrap();
        assert!(ck.save(&dir.path().join("b")).is_err());
    }
}
