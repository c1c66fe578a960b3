//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8   magic  b"PDARCHV\0"
//! 8   4   u32    format version
//! 12  8   u64    manifest length M
//! 20  M   JSON   manifest {"tensors": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
//! 20+M    blob   tensor bytes, IEEE-754 little-endian; offsets are relative to the blob
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 8] = b"PDARCHV\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveDType {
    F32,
    F64,
}

impl ArchiveDType {
    fn size(self) -> usize {
        match self {
            ArchiveDType::F32 => 4,
            ArchiveDType::F64 => 8,
        }
    }

    fn from_candle(dtype: DType) -> Result<Self> {
        match dtype {
            DType::F32 => Ok(ArchiveDType::F32),
            DType::F64 => Ok(ArchiveDType::F64),
            other => Err(invalid!("archive does not store dtype {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: ArchiveDType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A loaded archive: tensors by name plus free-form metadata.
#[derive(Clone, Debug)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
    pub manifest: Manifest,
}

impl Archive {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("archive has no tensor named {name}")))
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptArchive {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes tensors (in the given order) and metadata to `path`.
pub fn write_archive(path: &Path, tensors: &[(String, Tensor)], meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let dtype = ArchiveDType::from_candle(t.dtype())?;
        let start = blob.len() as u64;
        let flat = t.flatten_all()?;
        match dtype {
            ArchiveDType::F32 => {
                for v in flat.to_vec1::<f32>()? {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArchiveDType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype,
            shape: t.dims().to_vec(),
            offset: start,
            nbytes: blob.len() as u64 - start,
        });
    }
    let manifest = Manifest {
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| invalid!("manifest encoding: {e}"))?;

    let tmp: PathBuf = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(path, "file shorter than header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let blob_start = HEADER_LEN
        .checked_add(mlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
        .map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    Ok((manifest, blob_start))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_bytes(path)?;
    Ok(parse_header(path, &bytes)?.0)
}

pub fn read_archive(path: &Path, device: &Device) -> Result<Archive> {
    let bytes = read_bytes(path)?;
    let (manifest, blob_start) = parse_header(path, &bytes)?;
    let blob = &bytes[blob_start..];
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.nbytes as usize != count * e.dtype.size() {
            return Err(corrupt(path, format!("tensor {} size does not match its shape", e.name)));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(e.nbytes as usize)
            .filter(|end| *end <= blob.len())
            .ok_or_else(|| corrupt(path, format!("truncated data for tensor {}", e.name)))?;
        let raw = &blob[start..end];
        let t = match e.dtype {
            ArchiveDType::F32 => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            ArchiveDType::F64 => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
        };
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(corrupt(path, format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Archive {
        tensors,
        meta: manifest.meta.clone(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        let d = Device::Cpu;
        vec![
            ("b.weight".into(), Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &d).unwrap()),
            ("a.bias".into(), Tensor::new(&[std::f64::consts::PI, 1e-300], &d).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pdar");
        write_archive(&p, &sample(), serde_json::json!({"step": 3})).unwrap();
        let a = read_archive(&p, &Device::Cpu).unwrap();
        assert_eq!(a.meta["step"], 3);
        assert_eq!(a.get("a.bias").unwrap().to_vec1::<f64>().unwrap(), vec![std::f64::consts::PI, 1e-300]);
        assert_eq!(
            a.get("b.weight").unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 8.0]]
        );
    }

    #[test]
    fn manifest_lists_shape_dtype_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pdar");
        write_archive(&p, &sample(), serde_json::Value::Null).unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.tensors.len(), 2);
        assert_eq!(m.tensors[0].name, "b.weight");
        assert_eq!(m.tensors[0].dtype, ArchiveDType::F32);
        assert_eq!(m.tensors[0].shape, vec![2, 2]);
        assert_eq!((m.tensors[0].offset, m.tensors[0].nbytes), (0, 16));
        assert_eq!((m.tensors[1].offset, m.tensors[1].nbytes), (16, 16));
    }

    #[test]
    fn truncation_and_bad_headers_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pdar");
        write_archive(&p, &sample(), serde_json::Value::Null).unwrap();
        let bytes = fs::read(&p).unwrap();

        let cut = dir.path().join("cut.pdar");
        fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_archive(&cut, &Device::Cpu), Err(Error::CorruptArchive { .. })));
        fs::write(&cut, &bytes[..10]).unwrap();
        assert!(matches!(read_archive(&cut, &Device::Cpu), Err(Error::CorruptArchive { .. })));
        fs::write(&cut, &bytes[..40]).unwrap();
        assert!(matches!(read_archive(&cut, &Device::Cpu), Err(Error::CorruptArchive { .. })));

        let mut v2 = bytes.clone();
        v2[8] = 2;
        fs::write(&cut, &v2).unwrap();
        assert!(matches!(
            read_archive(&cut, &Device::Cpu),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let mut bad = bytes;
        bad[0] = b'X';
        fs::write(&cut, &bad).unwrap();
        assert!(matches!(read_archive(&cut, &Device::Cpu), Err(Error::CorruptArchive { .. })));

        assert!(matches!(
            read_archive(&dir.path().join("missing"), &Device::Cpu),
            Err(Error::Io { .. })
        ));
    }
}
