//! PDCK checkpoint archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "PDCK"
//! version u32      currently 1
//! count   u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8), rank u32, dims u32 × rank, f32 LE payload
//! ```
//!
//! Arrays keep their insertion order, and payloads are raw f32 bit patterns,
//! so save → load → save reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: [u8; 4] = *b"PDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered list of named f32 arrays.
#[derive(Default, Clone, Debug, PartialEq)]
pub struct Archive {
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: Vec<f32>) {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.entries.push(ArchiveEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Snapshot every tensor of a parameter store, in store order.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut a = Self::new();
        for id in store.ids() {
            a.push(store.name(id), store.shape(id), store.values(id).to_vec());
        }
        a
    }

    /// Rebuild a parameter store from entries with the given name prefix.
    pub fn to_store(&self, prefix: &str, path: &Path) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            store.add(&e.name, e.values.clone(), &e.shape).map_err(|err| Error::Checkpoint {
                path: path.display().to_string(),
                msg: err.to_string(),
            })?;
        }
        if store.is_empty() {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("no arrays with prefix {prefix}"),
            });
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint { path: path.display().to_string(), msg };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4).map_err(fail)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("bad magic {magic:02x?}"),
            });
        }
        let version = cur.u32().map_err(fail)?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("unsupported version {version}"),
            });
        }
        let count = cur.u32().map_err(fail)? as usize;
        let mut archive = Archive::new();
        for i in 0..count {
            let err = |msg: String| Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("array {i}: {msg}"),
            };
            let name_len = cur.u32().map_err(&err)? as usize;
            let name_bytes = cur.take(name_len).map_err(&err)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|e| err(format!("name not UTF-8: {e}")))?
                .to_string();
            let rank = cur.u32().map_err(&err)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32().map_err(&err)? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = cur.take(numel * 4).map_err(&err)?;
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.entries.push(ArchiveEntry { name, shape, values });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(archive)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
