//! Single-file binary container for named tensors plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic (`b"SGXC"`)                       |
//! | 4      | 4    | format version (u32)                    |
//! | 8      | 8    | header length `H` (u64)                 |
//! | 16     | H    | header, UTF-8 JSON                      |
//! | 16 + H | 8    | tensor count (u64)                      |
//!
//! followed by one record per tensor: name length (u32), name bytes, dtype
//! tag (u8, 1 = f32, 2 = f64), rank (u32), dims (u64 each), element data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{dtype_width, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGXC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
        for &v in t.data() {
            v.to_le_bytes_vec(&mut bytes);
        }
        Self { name: name.into(), dtype: T::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    /// Decode into `T`, converting between float widths when needed.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            1 => self.bytes.chunks_exact(4).map(|c| T::lit(f32::from_le_slice(c) as f64)).collect(),
            2 => self.bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_slice(c))).collect(),
            d => return Err(Error::Checkpoint(format!("tensor `{}` has unknown dtype {d}", self.name))),
        };
        Tensor::try_new(self.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<RawTensor>,
}

impl Container {
    pub fn new(header: serde_json::Value) -> Self {
        Self { header, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(RawTensor::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
            .to_tensor()
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix<T: Scalar>(&self, prefix: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix(prefix).map(|rest| (rest.to_string(), t)))
            .map(|(n, t)| Ok((n, t.to_tensor()?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a container file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let hlen = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let width = dtype_width(dtype)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has unknown dtype {dtype}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n * width)?.to_vec();
            tensors.push(RawTensor { name, dtype, shape, bytes: data });
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
