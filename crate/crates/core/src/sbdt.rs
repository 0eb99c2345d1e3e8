//! SBDT tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! "SBDT"            4 bytes magic
//! version           u32 (= 1)
//! count             u32
//! count × {
//!     name_len      u16
//!     name          name_len bytes, UTF-8
//!     ndim          u32
//!     dims          ndim × u64
//!     payload       product(dims) × f64
//! }
//! manifest_len      u64
//! manifest          manifest_len bytes, UTF-8
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SBDT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SbdtError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: u64 },

    #[error("unsupported version {found} at offset {offset} (expected {VERSION})")]
    UnsupportedVersion { found: u32, offset: u64 },

    #[error("truncated {what} at offset {offset}: needed {needed} more bytes")]
    Truncated {
        what: &'static str,
        offset: u64,
        needed: u64,
    },

    #[error("invalid UTF-8 in {what} at offset {offset}")]
    InvalidUtf8 { what: &'static str, offset: u64 },

    #[error("invalid tensor shape {dims:?} at offset {offset}")]
    BadShape { dims: Vec<u64>, offset: u64 },

    #[error("{count} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { count: u64, offset: u64 },

    #[error("tensor name of {len} bytes exceeds the u16 limit")]
    NameTooLong { len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named tensors plus a free-form text manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub tensors: Vec<(String, Tensor)>,
    pub manifest: String,
}

impl TensorBundle {
    pub fn new(manifest: impl Into<String>) -> Self {
        Self {
            tensors: Vec::new(),
            manifest: manifest.into(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub fn encode(bundle: &TensorBundle) -> Result<Vec<u8>, SbdtError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &bundle.tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| SbdtError::NameTooLong { len: name.len() })?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(bundle.manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(bundle.manifest.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SbdtError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(SbdtError::Truncated {
                what,
                offset: self.pos as u64,
                needed: (n - available) as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, SbdtError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, SbdtError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, SbdtError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> Result<String, SbdtError> {
        let offset = self.pos as u64;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| SbdtError::InvalidUtf8 { what, offset })
    }
}

pub fn decode(buf: &[u8]) -> Result<TensorBundle, SbdtError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SbdtError::BadMagic { offset: 0 });
    }
    let version_offset = r.pos as u64;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SbdtError::UnsupportedVersion {
            found: version,
            offset: version_offset,
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?;
        let shape_offset = r.pos as u64;
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(r.u64("dims")?);
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| dims.iter().all(|&d| d > 0) && n.checked_mul(8).is_some())
            .ok_or_else(|| SbdtError::BadShape {
                dims: dims.clone(),
                offset: shape_offset,
            })?;
        let payload_len = usize::try_from(numel * 8).map_err(|_| SbdtError::BadShape {
            dims: dims.clone(),
            offset: shape_offset,
        })?;
        let payload = r.take(payload_len, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape = dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(shape, data).map_err(|_| SbdtError::BadShape {
            dims,
            offset: shape_offset,
        })?;
        tensors.push((name, tensor));
    }
    let manifest_len = r.u64("manifest length")?;
    let manifest_len = usize::try_from(manifest_len).map_err(|_| SbdtError::Truncated {
        what: "manifest",
        offset: r.pos as u64,
        needed: manifest_len,
    })?;
    let manifest = r.utf8(manifest_len, "manifest")?;
    if r.pos != buf.len() {
        return Err(SbdtError::TrailingBytes {
            count: (buf.len() - r.pos) as u64,
            offset: r.pos as u64,
        });
    }
    Ok(TensorBundle { tensors, manifest })
}

pub fn save_tensors(path: impl AsRef<Path>, bundle: &TensorBundle) -> Result<(), SbdtError> {
    std::fs::write(path, encode(bundle)?)?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<TensorBundle, SbdtError> {
    decode(&std::fs::read(path)?)
}
