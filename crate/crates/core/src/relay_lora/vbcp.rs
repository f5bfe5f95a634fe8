//! VBCP: a single-file named-tensor checkpoint.
//!
//! ```text
//! "VBCP"                 4 bytes
//! version                u32 little-endian (currently 1)
//! header length          u64 little-endian
//! header                 UTF-8 JSON, space-padded so the data section
//!                        starts on an 8-byte boundary
//! data                   little-endian f32 tensors, each at an 8-byte
//!                        aligned offset relative to the data section
//! ```
//!
//! The header is `{"metadata": {..}, "tensors": [{name, dtype, shape,
//! offset, nbytes}, ..]}` with metadata keys sorted. Values are held as f64
//! in memory and rounded to nearest-even f32 on write.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"VBCP";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// Ordered named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: IndexMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing tensor, keeping its position.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTarget(name.to_string()))?;
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTarget(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Same tensors with every value rounded to the f32 storage grid.
    pub fn to_storage_precision(&self) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
            .collect();
        Checkpoint { tensors, metadata: self.metadata.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let (mut offset, mut end) = (0u64, 0u64);
        for (name, t) in &self.tensors {
            let nbytes = 4 * t.len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            end = offset + nbytes;
            offset = align8(end);
        }
        let header = Header { metadata: self.metadata.clone(), tensors: entries };
        let mut json = serde_json::to_vec(&header)?;
        while (PREAMBLE + json.len()) % 8 != 0 {
            json.push(b' ');
        }

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + end as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let data_start = out.len();
        for (entry, t) in header.tensors.iter().zip(self.tensors.values()) {
            out.resize(data_start + entry.offset as usize, 0);
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (header, data) = split(bytes)?;
        let mut ckpt = Checkpoint { tensors: IndexMap::new(), metadata: header.metadata };
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes != 4 * numel as u64 {
                return Err(Error::Format(format!("tensor `{}`: {} bytes for {numel} elements", e.name, e.nbytes)));
            }
            if e.offset % 8 != 0 {
                return Err(Error::Format(format!("tensor `{}` is not 8-byte aligned", e.name)));
            }
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= data.len() as u64);
            let Some(end) = end else {
                return Err(Error::Format(format!("tensor `{}` runs past the end of the file", e.name)));
            };
            let raw = &data[e.offset as usize..end as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            ckpt.insert(e.name, Tensor::new(e.shape, values)?)?;
        }
        Ok(ckpt)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}

/// Writes through a per-process temporary file and renames it into place,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

fn align8(n: u64) -> u64 {
    n.div_ceil(8) * 8
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing VBCP magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported VBCP version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (PREAMBLE as u64)
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Format(format!("header length {len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end as usize])
        .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    Ok((header, &bytes[end as usize..]))
}

/// Pretty-printed header JSON followed by a newline.
pub fn inspect(bytes: &[u8]) -> Result<String> {
    let (header, _) = split(bytes)?;
    Ok(serde_json::to_string_pretty(&header)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(11);
        let mut c = Checkpoint::new();
        c.insert("w", rng.gaussian([3, 5], 1.0)).unwrap();
        c.insert("b", rng.gaussian([3], 1.0)).unwrap();
        c.insert("s", Tensor::scalar(2.5)).unwrap();
        c.set_meta("stage", "base");
        c
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VBCP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!((16 + len) % 8, 0);
        // 15 floats -> 60 bytes -> next at 64; 3 floats -> 12 -> next at 80; 1 float
        assert_eq!(bytes.len(), 16 + len + 84);
        let text = inspect(&bytes).unwrap();
        assert!(text.contains("\"offset\": 64"));
        assert!(text.contains("\"offset\": 80"));
    }

    #[test]
    fn round_trip_rounds_to_f32_then_is_stable() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c.to_storage_precision());
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        assert_eq!(back.names().collect::<Vec<_>>(), ["w", "b", "s"]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn names_are_unique() {
        let mut c = sample();
        assert!(c.insert("w", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vbcp");
        let c = sample();
        c.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), c.to_storage_precision());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
