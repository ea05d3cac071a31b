//! Named-tensor binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[8] | version u32
//! | meta_count u32 | { key_len u32, key, val_len u32, val }*
//! | tensor_count u32 | { name_len u32, name, dtype u8, rank u32, dims u64*, offset u64 }*
//! | payload_len u64 | payload bytes (row-major, little-endian)
//! | sha256[32] over everything above
//! ```
//!
//! The same container backs backbone checkpoints, side-chain parameter files,
//! and the dataset file header conventions; each use picks its own magic tag.

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone)]
pub struct ArchiveTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Row-major little-endian payload.
    pub bytes: Vec<u8>,
}

impl ArchiveTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// An ordered named-tensor map plus string metadata.
#[derive(Clone)]
pub struct Archive {
    pub magic: [u8; 8],
    metadata: Vec<(String, String)>,
    tensors: Vec<ArchiveTensor>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("invalid UTF-8 string"))
    }
}

impl Archive {
    pub fn new(magic: [u8; 8]) -> Self {
        Archive {
            magic,
            metadata: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, val: impl ToString) {
        let key = key.into();
        let val = val.to_string();
        if let Some(slot) = self.metadata.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = val;
        } else {
            self.metadata.push((key, val));
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    pub fn tensors(&self) -> &[ArchiveTensor] {
        &self.tensors
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        assert!(
            !self.tensors.iter().any(|e| e.name == name),
            "archive already contains tensor `{name}`"
        );
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.tensors.push(ArchiveTensor {
            name,
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            bytes,
        });
    }

    pub fn find(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|e| e.name == name)
    }

    /// Decode a tensor, casting the stored precision to `T` if they differ.
    /// Returned tensors are frozen leaves.
    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self.find(name).ok_or_else(|| Error::Corrupt {
            path: PathBuf::from("<archive>"),
            reason: format!("missing tensor `{name}`"),
        })?;
        let n = entry.numel();
        let mut data = Vec::with_capacity(n);
        match entry.dtype {
            DType::F32 => {
                for chunk in entry.bytes.chunks_exact(4) {
                    data.push(T::from_f64(f32::read_le(chunk) as f64));
                }
            }
            DType::F64 => {
                for chunk in entry.bytes.chunks_exact(8) {
                    data.push(T::from_f64(f64::read_le(chunk)));
                }
            }
        }
        Ok(Tensor::new(data, &entry.dims))
    }

    /// Canonical byte serialization, hash included.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        push_u32(&mut out, FORMAT_VERSION);

        push_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            push_str(&mut out, k);
            push_str(&mut out, v);
        }

        push_u32(&mut out, self.tensors.len() as u32);
        let mut offset = 0u64;
        for t in &self.tensors {
            push_str(&mut out, &t.name);
            out.push(t.dtype.tag());
            push_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                push_u64(&mut out, d as u64);
            }
            push_u64(&mut out, offset);
            offset += t.bytes.len() as u64;
        }

        push_u64(&mut out, offset);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// SHA-256 over the canonical serialization prefix (covers metadata,
    /// directory, and every tensor byte).
    pub fn content_hash(&self) -> [u8; 32] {
        let bytes = self.serialize();
        bytes[bytes.len() - 32..].try_into().unwrap()
    }

    pub fn content_hash_hex(&self) -> String {
        self.content_hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn deserialize(buf: &[u8], expected_magic: [u8; 8], path: &Path) -> Result<Self> {
        if buf.len() < 8 + 4 + 32 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("file too short ({} bytes)", buf.len()),
            });
        }
        if buf[..8] != expected_magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(&expected_magic).into_owned(),
            });
        }
        let body = &buf[..buf.len() - 32];
        let stored_hash = &buf[buf.len() - 32..];
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_hash {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "content hash mismatch".into(),
            });
        }

        let mut r = Reader {
            buf: body,
            pos: 8,
            path,
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let meta_count = r.u32()? as usize;
        let mut metadata = Vec::with_capacity(meta_count);
        for _ in 0..meta_count {
            let k = r.string()?;
            let v = r.string()?;
            metadata.push((k, v));
        }

        let tensor_count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = r.string()?;
            let dtype_tag = r.bytes(1)?[0];
            let dtype = DType::from_tag(dtype_tag)
                .ok_or_else(|| r.corrupt(format!("unknown dtype tag {dtype_tag}")))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let offset = r.u64()?;
            dir.push((name, dtype, dims, offset));
        }

        let payload_len = r.u64()? as usize;
        let payload = r.bytes(payload_len)?;
        if r.pos != body.len() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "trailing bytes after payload".into(),
            });
        }

        let mut tensors = Vec::with_capacity(tensor_count);
        for (name, dtype, dims, offset) in dir {
            if tensors.iter().any(|t: &ArchiveTensor| t.name == name) {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("duplicate tensor name `{name}`"),
                });
            }
            let nbytes = dims.iter().product::<usize>() * dtype.size();
            let start = offset as usize;
            if start + nbytes > payload.len() {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("tensor `{name}` payload out of bounds"),
                });
            }
            tensors.push(ArchiveTensor {
                name,
                dtype,
                dims,
                bytes: payload[start..start + nbytes].to_vec(),
            });
        }

        Ok(Archive {
            magic: expected_magic,
            metadata,
            tensors,
        })
    }

    pub fn load(path: &Path, expected_magic: [u8; 8]) -> Result<Self> {
        let buf = std::fs::read(path)?;
        Self::deserialize(&buf, expected_magic, path)
    }
}
