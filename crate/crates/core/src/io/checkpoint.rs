//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AKD1"  u32 version  u32 count
//! count × { u32 name_len, name bytes (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!           u32 rank, rank × u64 extent, payload }
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AKD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor stored as f64.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.push_as(name, tensor, DType::F64);
    }

    /// Appends a tensor stored with `dtype`. f32 storage rounds the values
    /// now, so what is held in memory is exactly what a reload yields.
    pub fn push_as(&mut self, name: impl Into<String>, mut tensor: Tensor, dtype: DType) {
        if dtype == DType::F32 {
            for v in tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.entries.push(Entry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            let shape = e.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => {
                    for &v in e.tensor.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in e.tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(corrupt(0, "file shorter than the CRC trailer"));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(corrupt(
                body_len as u64,
                format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut r = Reader {
            buf: &bytes[..body_len],
            pos: 0,
        };
        if r.take(4)? != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(4, format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt(at as u64 + 4, "tensor name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(corrupt(tag_at as u64, format!("unknown dtype tag {t}"))),
            };
            let rank = r.u32()? as usize;
            let shape_at = r.pos;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(dtype.width()).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| corrupt(shape_at as u64, format!("extents {shape:?} overrun the file")))?;
            let payload = r.take(numel * dtype.width())?;
            let data: Vec<f64> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| corrupt(shape_at as u64, e.to_string()))?;
            entries.push(Entry { name, dtype, tensor });
        }
        if r.remaining() != 0 {
            return Err(corrupt(r.pos as u64, "trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn corrupt(offset: u64, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt(
                self.pos as u64,
                format!("need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Stores UTF-8 text as an f64 tensor of byte values.
pub fn text_tensor(text: &str) -> Tensor {
    let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
    if bytes.is_empty() {
        Tensor::vector(vec![0.0])
    } else {
        Tensor::vector(bytes)
    }
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| {
            if (1.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::config(format!("text tensor holds non-byte value {v}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::config(format!("text tensor is not UTF-8: {e}")))
}
