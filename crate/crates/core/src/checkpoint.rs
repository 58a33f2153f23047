//! Versioned binary checkpoints of named `f64` tensors.
//!
//! Layout (little-endian): magic `PHMC`, `u32` version, `u32` header length,
//! UTF-8 `key = value` header, `u32` tensor count, then per tensor a `u32`
//! name length, the name, a `u64` element count and the raw values.
//! Values are stored bit-for-bit, so a round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Params;

pub const MAGIC: &[u8; 4] = b"PHMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(header: BTreeMap<String, String>) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params` under its visitor name.
    pub fn add_params(&mut self, params: &dyn Params) {
        params.visit("", &mut |name, v| self.tensors.push((name.to_string(), v.to_vec())));
    }

    pub fn add_tensor(&mut self, name: &str, values: Vec<f64>) {
        self.tensors.push((name.to_string(), values));
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks '{key}'")))
    }

    /// Overwrites every tensor of `params` from the stored values; each must
    /// exist with matching length.
    pub fn restore_params(&self, params: &mut dyn Params) -> Result<()> {
        let mut err = None;
        params.visit_mut("", &mut |name, v| {
            if err.is_some() {
                return;
            }
            match self.tensor(name) {
                Some(src) if src.len() == v.len() => v.copy_from_slice(src),
                Some(src) => {
                    err = Some(Error::Format(format!(
                        "tensor '{name}' has {} values, model expects {}",
                        src.len(),
                        v.len()
                    )))
                }
                None => err = Some(Error::Format(format!("checkpoint lacks tensor '{name}'"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: String = self.header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, values) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header_text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let header = crate::pipeline::config::parse_kv(header_text)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let len = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format("tensor too large".into()))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
