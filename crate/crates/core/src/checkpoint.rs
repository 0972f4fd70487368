//! Binary tensor container.
//!
//! ```text
//! "SLQ1"                magic
//! u8                    version (1)
//! u32 + bytes           metadata, UTF-8 JSON object of string values
//! u32                   tensor count
//! per tensor:
//!   u16 + bytes         name
//!   u8                  dtype (0 = f32, 1 = f64)
//!   u8 + u32 * ndim     shape
//!   u64                 byte offset into the data section
//!   u64                 byte length
//!   [u8; 32]            SHA-256 of the tensor's bytes
//! data section          little-endian raw arrays
//! ```
//!
//! All integers are little-endian. Loaders verify every checksum.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::tensor::{hex, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SLQ1";
pub const VERSION: u8 = 1;

const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes: t.to_le_bytes(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        ensure!(
            self.dtype == T::DTYPE,
            Format,
            "tensor '{}' stored as {}, requested {}",
            self.name,
            self.dtype.name(),
            T::DTYPE.name()
        );
        let size = T::DTYPE.size();
        let data = self.bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn checksum(&self) -> [u8; 32] {
        Sha256::digest(&self.bytes).into()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.entries.push(Entry::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("container has no tensor '{name}'")))
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)?.to_tensor()
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format(format!("container metadata lacks '{key}'")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            ensure!(e.name.len() <= u16::MAX as usize, Format, "tensor name too long");
            ensure!(e.shape.len() <= MAX_NDIM, Format, "tensor '{}' has too many dims", e.name);
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                ensure!(d <= u32::MAX as usize, Format, "dimension too large");
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.checksum());
            offset += e.bytes.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    /// Decodes and verifies a container. Structural problems are format
    /// errors; checksum mismatches are integrity errors.
    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, Format, "bad magic");
        let version = r.u8()?;
        ensure!(version == VERSION, Format, "unsupported container version {}", version);
        let meta_len = r.u32()? as usize;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        // smallest possible manifest record is 2 + 1 + 1 + 8 + 8 + 32 bytes
        ensure!(count <= r.remaining() / 52, Format, "tensor count {} exceeds input", count);
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("'{name}': unknown dtype")))?;
            let ndim = r.u8()? as usize;
            ensure!(ndim <= MAX_NDIM, Format, "'{}': {} dims", name, ndim);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()?;
            let len = r.u64()?;
            let mut sum = [0u8; 32];
            sum.copy_from_slice(r.take(32)?);
            manifest.push((name, dtype, shape, offset, len, sum));
        }
        let data = &bytes[r.pos..];
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, dtype, shape, offset, len, sum) in manifest {
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("'{name}': shape overflows")))?;
            let expect = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("'{name}': size overflows")))?;
            ensure!(len as usize as u64 == len && len as usize == expect, Format, "'{}': {} bytes for shape {:?}", name, len, shape);
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= data.len() as u64)
                .ok_or_else(|| Error::Format(format!("'{name}': data range outside file")))?;
            let slice = &data[offset as usize..end as usize];
            let actual: [u8; 32] = Sha256::digest(slice).into();
            if actual != sum {
                return Err(Error::Integrity(format!(
                    "tensor '{name}' checksum {} does not match manifest {}",
                    hex(&actual),
                    hex(&sum)
                )));
            }
            entries.push(Entry {
                name,
                dtype,
                shape,
                bytes: slice.to_vec(),
            });
        }
        Ok(Container { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        Container::decode(&std::fs::read(path)?)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        ensure!(n <= self.remaining(), Format, "truncated container");
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new().meta("kind", "test");
        c.push("a", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5));
        c.push("b", &Tensor::<f64>::from_fn(&[4], |i| -(i as f64)));
        c
    }

    #[test]
    fn encode_decode_round_trip() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..4], b"SLQ1");
        assert_eq!(bytes[4], 1);
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, c);
        let a: Tensor<f32> = back.tensor("a").unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a.data()[5], 2.5);
        assert!(back.tensor::<f32>("b").is_err());
    }

    #[test]
    fn flipped_data_byte_is_an_integrity_error() {
        let mut bytes = sample().encode().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Container::decode(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncation_and_garbage_are_format_errors() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 5, 9, 20, bytes.len() - 1] {
            assert!(Container::decode(&bytes[..cut]).is_err());
        }
        assert!(matches!(Container::decode(b"NOPE\x01"), Err(Error::Format(_))));
    }
}
