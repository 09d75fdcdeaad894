//! Binary checkpoint container: magic, version, then length-prefixed named
//! tensor records, all little-endian. Readers skip records they do not
//! recognize so newer writers stay loadable.
//!
//! Record layout after the 8-byte `GNPMCKPT` magic and u32 version:
//!   u64 record_len  (bytes that follow for this record)
//!   u16 name_len, name bytes (UTF-8)
//!   u8 dtype tag (0 = f32, 1 = f64)
//!   u8 rank, u64 dims[rank]
//!   payload (product(dims) * dtype size bytes)

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Dtype, Scalar};

pub const MAGIC: &[u8; 8] = b"GNPMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },
    #[error("unsupported checkpoint version {found} in {path}")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("truncated checkpoint {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("malformed record in {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("missing record {name}")]
    MissingRecord { name: String },
    #[error("record {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl Record {
    pub fn values<E: Scalar>(&self) -> Vec<E> {
        assert_eq!(self.dtype, E::DTYPE, "record {} dtype mismatch", self.name);
        E::from_le_bytes_vec(&self.data).expect("payload length validated at load")
    }
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push<E: Scalar>(&mut self, name: &str, dims: &[usize], values: &[E]) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        self.records.push(Record {
            name: name.to_string(),
            dtype: E::DTYPE,
            dims: dims.to_vec(),
            data: E::to_le_bytes_vec(values),
        });
    }

    pub fn push_bytes(&mut self, name: &str, data: &[u8]) {
        self.records.push(Record {
            name: name.to_string(),
            dtype: Dtype::U8,
            dims: vec![data.len()],
            data: data.to_vec(),
        });
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        self.get(name)
            .filter(|r| r.dtype == Dtype::U8)
            .map(|r| r.data.as_slice())
    }

    pub fn push_scalar_u64(&mut self, name: &str, value: u64) {
        // Scalars travel as rank-0 f64; u64 values used here fit exactly.
        self.push::<f64>(name, &[], &[value as f64]);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingRecord {
                name: name.to_string(),
            })
    }

    pub fn require_values<E: Scalar>(
        &self,
        name: &str,
        dims: &[usize],
    ) -> Result<Vec<E>, CheckpointError> {
        let rec = self.require(name)?;
        if rec.dims != dims {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: rec.dims.clone(),
                expected: dims.to_vec(),
            });
        }
        Ok(rec.values())
    }

    pub fn scalar_u64(&self, name: &str) -> Result<u64, CheckpointError> {
        let v: Vec<f64> = self.require_values(name, &[])?;
        Ok(v[0] as u64)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for rec in &self.records {
            let mut body = Vec::new();
            body.extend_from_slice(&(rec.name.len() as u16).to_le_bytes());
            body.extend_from_slice(rec.name.as_bytes());
            body.push(rec.dtype.tag());
            body.push(rec.dims.len() as u8);
            for &d in &rec.dims {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            body.extend_from_slice(&rec.data);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&out).map_err(io)
    }

    /// Load every record, keeping unknown ones; callers decide which names
    /// they consume.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let trunc = |detail: &str| CheckpointError::Truncated {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 12 {
            return Err(trunc("shorter than magic plus version"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let mut records = Vec::new();
        let mut pos = 12usize;
        while pos < bytes.len() {
            if pos + 8 > bytes.len() {
                return Err(trunc("partial record length"));
            }
            let rec_len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if pos + rec_len > bytes.len() {
                return Err(trunc(&format!(
                    "record claims {rec_len} bytes, {} remain",
                    bytes.len() - pos
                )));
            }
            let body = &bytes[pos..pos + rec_len];
            pos += rec_len;
            let malformed = |detail: String| CheckpointError::Malformed {
                path: path.to_path_buf(),
                detail,
            };
            if body.len() < 2 {
                return Err(malformed("record shorter than name length".into()));
            }
            let name_len = u16::from_le_bytes(body[..2].try_into().unwrap()) as usize;
            if body.len() < 2 + name_len + 2 {
                return Err(malformed("record shorter than its header".into()));
            }
            let name = std::str::from_utf8(&body[2..2 + name_len])
                .map_err(|_| malformed("record name is not UTF-8".into()))?
                .to_string();
            let mut p = 2 + name_len;
            let dtype = Dtype::from_tag(body[p])
                .ok_or_else(|| malformed(format!("unknown dtype tag {}", body[p])))?;
            let rank = body[p + 1] as usize;
            p += 2;
            if body.len() < p + rank * 8 {
                return Err(malformed(format!("record {name} truncated in dims")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(body[p..p + 8].try_into().unwrap()) as usize);
                p += 8;
            }
            let expect = dims.iter().product::<usize>() * dtype.size();
            if body.len() - p != expect {
                return Err(malformed(format!(
                    "record {name} payload is {} bytes, shape needs {expect}",
                    body.len() - p
                )));
            }
            records.push(Record {
                name,
                dtype,
                dims,
                data: body[p..].to_vec(),
            });
        }
        Ok(Checkpoint { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_records() {
        let mut ck = Checkpoint::new();
        ck.push::<f32>("a.w", &[2, 3], &[1.0, 2.0, 3.0, -4.0, 0.5, 6.0]);
        ck.push::<f64>("b", &[2], &[1.25, -9.0]);
        ck.push_scalar_u64("meta.epoch", 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.records, ck.records);
        assert_eq!(back.scalar_u64("meta.epoch").unwrap(), 42);
        let w: Vec<f32> = back.require_values("a.w", &[2, 3]).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 3.0, -4.0, 0.5, 6.0]);
    }

    #[test]
    fn unknown_records_are_preserved_not_fatal() {
        let mut ck = Checkpoint::new();
        ck.push::<f32>("known", &[1], &[1.0]);
        ck.push::<f32>("future.extension", &[1], &[2.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.get("future.extension").is_some());
        let _: Vec<f32> = back.require_values("known", &[1]).unwrap();
    }

    #[test]
    fn truncated_file_is_structured_error() {
        let mut ck = Checkpoint::new();
        ck.push::<f32>("a", &[4], &[1.0, 2.0, 3.0, 4.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadVersion { found: 99, .. })
        ));
    }

    #[test]
    fn missing_record_and_shape_mismatch() {
        let mut ck = Checkpoint::new();
        ck.push::<f32>("a", &[2], &[1.0, 2.0]);
        assert!(matches!(
            ck.require("nope"),
            Err(CheckpointError::MissingRecord { .. })
        ));
        assert!(matches!(
            ck.require_values::<f32>("a", &[3]),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
