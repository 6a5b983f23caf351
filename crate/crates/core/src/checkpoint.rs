//! Shared binary tensor convention: a JSON manifest lists tensor names and
//! shapes in order, and a sibling `.bin` file concatenates their row-major
//! little-endian values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Mat)>, dtype: Dtype) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: [m.rows(), m.cols()],
            dtype,
        });
        for &v in m.as_slice() {
            match dtype {
                Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    (entries, bytes)
}

pub fn decode_tensors(entries: &[TensorEntry], bytes: &[u8]) -> Result<Vec<(String, Mat)>> {
    let expected: usize = entries.iter().map(|e| e.shape[0] * e.shape[1] * e.dtype.width()).sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "binary holds {} bytes, manifest implies {}",
            bytes.len(),
            expected
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    let mut pos = 0;
    for e in entries {
        let n = e.shape[0] * e.shape[1];
        let w = e.dtype.width();
        let mut data = Vec::with_capacity(n);
        for chunk in bytes[pos..pos + n * w].chunks_exact(w) {
            let v = match e.dtype {
                Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
            };
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {} holds a non-finite value", e.name)));
            }
            data.push(v);
        }
        pos += n * w;
        out.push((e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)?));
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
