//! Named-tensor archive: a directory holding `manifest.json` and
//! `tensors.bin`.
//!
//! The manifest lists every tensor's name, shape, byte offset and element
//! count. The payload is the concatenation of all tensors as row-major
//! little-endian IEEE-754 binary32 values, in manifest order. Values are
//! held as `f64` in memory and rounded to `f32` on write.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT: &str = "named-tensors-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, u64>,
    tensors: Vec<NamedTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        if let Some(t) = self.tensors.iter_mut().find(|t| t.name == name) {
            t.shape = shape;
            t.data = data;
        } else {
            self.tensors.push(NamedTensor { name, shape, data });
        }
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(name.into(), vec![m.rows(), m.cols()], m.data().to_vec());
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name.into(), vec![v.len()], v.to_vec());
    }

    fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        match t.shape[..] {
            [r, c] => Matrix::from_vec(r, c, t.data.clone()),
            _ => Err(Error::Archive(format!("{name:?} has shape {:?}, expected 2-D", t.shape))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        match t.shape[..] {
            [_] => Ok(t.data.clone()),
            _ => Err(Error::Archive(format!("{name:?} has shape {:?}, expected 1-D", t.shape))),
        }
    }

    pub fn meta(&self, key: &str) -> Result<u64> {
        self.metadata
            .get(key)
            .copied()
            .ok_or_else(|| Error::Archive(format!("missing metadata {key:?}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len(),
                length: t.data.len(),
            });
            for &v in &t.data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            dtype: "f32le".into(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(DATA_FILE), payload)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT || manifest.dtype != "f32le" {
            return Err(Error::Archive(format!(
                "unsupported format {:?}/{:?}",
                manifest.format, manifest.dtype
            )));
        }
        let payload = fs::read(dir.join(DATA_FILE))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.shape.iter().product::<usize>() != e.length {
                return Err(Error::Archive(format!("{:?}: shape {:?} vs length {}", e.name, e.shape, e.length)));
            }
            let end = e.offset + 4 * e.length;
            let bytes = payload
                .get(e.offset..end)
                .ok_or_else(|| Error::Archive(format!("{:?} runs past the payload", e.name)))?;
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("archive read"));
            }
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::new();
        a.metadata.insert("heads".into(), 2);
        a.insert_matrix("w", &Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0]]));
        a.insert_vector("b", &[0.5, -0.125]);
        a.write(dir.path()).unwrap();
        let b = TensorArchive::read(dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta("heads").unwrap(), 2);
        assert!(b.matrix("b").is_err());
        assert!(b.vector("missing").is_err());
    }

    #[test]
    fn payload_is_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::new();
        a.insert_vector("x", &[1.0]);
        a.insert_vector("y", &[-2.0, 0.5]);
        a.write(dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join(DATA_FILE)).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[0..4], &[0x00, 0x00, 0x80, 0x3f]);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["tensors"][1]["offset"], 4);
        assert_eq!(manifest["tensors"][1]["shape"], serde_json::json!([2]));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::new();
        a.insert_vector("x", &[1.0, 2.0]);
        a.write(dir.path()).unwrap();
        std::fs::write(dir.path().join(DATA_FILE), [0u8; 4]).unwrap();
        assert!(matches!(TensorArchive::read(dir.path()), Err(Error::Archive(_))));
    }
}
