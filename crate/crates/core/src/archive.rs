//! Binary tensor archive shared by checkpoints and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CWFA"            4-byte magic
//! version           u32
//! header_len        u64
//! header            UTF-8 JSON {"entries":[{"name","dtype","shape"}, ...]}
//! zero padding      to the next multiple of 8
//! payload_0         raw f32 LE (dtype "f32") or UTF-8 JSON bytes (dtype "json")
//! zero padding      to the next multiple of 8
//! payload_1 ...
//! ```
//!
//! Payloads appear in header order. Entry order is insertion order, so writing
//! the same archive twice yields identical bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"CWFA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Json(serde_json::Value),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<HeaderEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Entry)>,
}

fn pad8(buf: &mut Vec<u8>) {
    while !buf.len().is_multiple_of(8) {
        buf.push(0);
    }
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_new(&self, name: &str) -> Result<()> {
        if name.is_empty() || self.contains(name) {
            return Err(Error::invalid(format!("archive entry name `{name}` is empty or taken")));
        }
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        self.check_new(&name)?;
        self.entries.push((name, Entry::Tensor(t)));
        Ok(())
    }

    pub fn insert_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let name = name.into();
        self.check_new(&name)?;
        self.entries.push((name, Entry::Json(serde_json::to_value(value)?)));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entry(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Json(_)) => Err(Error::Format(format!("entry `{name}` is JSON, not a tensor"))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        match self.entry(name) {
            Some(Entry::Json(v)) => Ok(serde_json::from_value(v.clone())?),
            Some(Entry::Tensor(_)) => Err(Error::Format(format!("entry `{name}` is a tensor, not JSON"))),
            None => Err(Error::MissingEntry(name.to_string())),
        }
    }

    /// Replace an existing entry's tensor, or append it.
    pub fn set_tensor(&mut self, name: &str, t: Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = Entry::Tensor(t),
            None => self.entries.push((name.to_string(), Entry::Tensor(t))),
        }
    }

    pub fn set_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let v = Entry::Json(serde_json::to_value(value)?);
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = v,
            None => self.entries.push((name.to_string(), v)),
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payloads = Vec::with_capacity(self.entries.len());
        let mut header = Header { entries: Vec::new() };
        for (name, e) in &self.entries {
            let (dtype, shape, bytes) = match e {
                Entry::Tensor(t) => {
                    let mut b = Vec::with_capacity(t.len() * 4);
                    for v in t.data() {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                    ("f32", t.shape().to_vec(), b)
                }
                Entry::Json(v) => {
                    let b = serde_json::to_vec(v)?;
                    ("json", vec![b.len()], b)
                }
            };
            header.entries.push(HeaderEntry {
                name: name.clone(),
                dtype: dtype.to_string(),
                shape,
            });
            payloads.push(bytes);
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in payloads {
            pad8(&mut out);
            out.extend_from_slice(&p);
        }
        pad8(&mut out);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Format("archive truncated".into());
        if bytes.len() < 16 {
            return Err(short());
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(short)?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| Error::Format(format!("bad archive header: {e}")))?;
        let mut pos = hend;
        let mut archive = Archive::new();
        for he in header.entries {
            pos = align8(pos);
            match he.dtype.as_str() {
                "f32" => {
                    let n: usize = he.shape.iter().product();
                    let end = pos.checked_add(n * 4).filter(|&e| e <= bytes.len()).ok_or_else(short)?;
                    let data = bytes[pos..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    archive.insert_tensor(he.name, Tensor::new(&he.shape, data)?)?;
                    pos = end;
                }
                "json" => {
                    let n = *he.shape.first().ok_or_else(|| Error::Format("json entry without length".into()))?;
                    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(short)?;
                    let v: serde_json::Value = serde_json::from_slice(&bytes[pos..end])?;
                    archive.check_new(&he.name)?;
                    archive.entries.push((he.name, Entry::Json(v)));
                    pos = end;
                }
                other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
            }
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
