//! `ALTW` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ALTW" | version u32 | count u32
//! count x { name_len u16 | name | dtype u8 | rank u8 | extents u32 x rank | offset u64 | len u64 }
//! zero padding to a 64-byte boundary
//! data section (offsets are relative to its start, each 64-byte aligned)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::memory::align_up;
use crate::tensor::{byte_size, DType, HostTensor};

use super::config::{ModelConfig, CONFIG_TENSOR};
use super::LoadError;

pub const MAGIC: &[u8; 4] = b"ALTW";
pub const VERSION: u32 = 1;

/// In-memory weight file: tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<HostTensor>,
}

impl WeightFile {
    pub fn new(tensors: Vec<HostTensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&HostTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&HostTensor, LoadError> {
        self.get(name).ok_or_else(|| LoadError::MissingTensor(name.to_string()))
    }

    pub fn config(&self) -> Result<ModelConfig, LoadError> {
        ModelConfig::from_tensor(self.require(CONFIG_TENSOR)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0usize;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name);
            header.push(t.dtype.code());
            header.push(t.shape.rank() as u8);
            for &d in t.shape.dims() {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
            header.extend_from_slice(&(offset as u64).to_le_bytes());
            header.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            offset = align_up(offset + t.data.len());
        }
        let data_start = align_up(header.len());
        let mut out = header;
        out.resize(data_start + offset, 0);
        let mut offset = 0;
        for t in &self.tensors {
            out[data_start + offset..data_start + offset + t.data.len()].copy_from_slice(&t.data);
            offset = align_up(offset + t.data.len());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(LoadError::BadMagic(magic.try_into().expect("4 bytes")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(LoadError::Version(version));
        }
        let count = r.u32("tensor count")? as usize;
        struct Record {
            name: String,
            dtype: DType,
            dims: Vec<usize>,
            offset: usize,
            len: usize,
        }
        let mut records = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| LoadError::Format(format!("record {i}: name is not UTF-8")))?;
            if !names.insert(name.clone()) {
                return Err(LoadError::DuplicateName(name));
            }
            let dtype = DType::from_code(r.u8("dtype")?)?;
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64("offset")? as usize;
            let len = r.u64("length")? as usize;
            let expected = byte_size(&dims, dtype)?;
            if len != expected {
                return Err(LoadError::Length {
                    name,
                    expected,
                    actual: len,
                });
            }
            if let Some(prev) = records.last().map(|p: &Record| p.offset + p.len) {
                if offset < prev {
                    return Err(LoadError::Format(format!("`{name}`: offset {offset} overlaps previous data ending at {prev}")));
                }
            }
            records.push(Record {
                name,
                dtype,
                dims,
                offset,
                len,
            });
        }
        let data_start = align_up(r.pos);
        let mut tensors = Vec::with_capacity(records.len());
        for rec in records {
            let start = data_start
                .checked_add(rec.offset)
                .filter(|s| s.checked_add(rec.len).is_some_and(|e| e <= bytes.len()))
                .ok_or_else(|| LoadError::Truncated(format!("data of `{}`", rec.name)))?;
            let data = bytes[start..start + rec.len].to_vec();
            tensors.push(HostTensor::new(rec.name, &rec.dims, rec.dtype, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), LoadError> {
        fs::write(path, self.to_bytes()).map_err(|e| LoadError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let bytes = fs::read(path).map_err(|e| LoadError::Io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Converts every matrix whose rows are whole blocks to Q4B; vectors
    /// and the config stay as they are.
    pub fn quantize(&self) -> Result<Self, LoadError> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let dims = t.shape.dims();
                if t.name != CONFIG_TENSOR && dims.len() == 2 && dims[1] % crate::quant::BLOCK_ELEMS == 0 {
                    t.convert(DType::Q4B).map_err(LoadError::from)
                } else {
                    Ok(t.clone())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { tensors })
    }

    /// Human-readable header dump.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        if let Ok(c) = self.config() {
            out += &format!(
                "config: vocab={} hidden={} intermediate={} layers={} heads={} kv_heads={} head_dim={} rope_theta={} rms_eps={} max_seq={}\n",
                c.vocab_size, c.hidden, c.intermediate, c.n_layers, c.n_heads, c.n_kv_heads, c.head_dim, c.rope_theta, c.rms_eps, c.max_seq
            );
        }
        out += &format!("tensors: {}\n", self.tensors.len());
        for t in &self.tensors {
            out += &format!("{:<24} {:<4} {:?} {} bytes\n", t.name, t.dtype.to_string(), t.shape, t.data.len());
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LoadError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LoadError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, LoadError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, LoadError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
