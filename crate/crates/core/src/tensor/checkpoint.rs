//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      16 bytes  "ICLM-CHECKPOINT1"
//! man_len    u64       byte length of the manifest
//! manifest   u32 count, then per entry:
//!              u32 name_len, name bytes (UTF-8),
//!              u32 rank, rank x u64 dims,
//!              u64 offset (in f64 elements from the start of the data block)
//! data       f64 values, little-endian, entries in manifest order
//! ```
//!
//! Entries are written in the order given, so identical inputs produce
//! byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 16] = b"ICLM-CHECKPOINT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    manifest.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset: u64 = 0;
    for e in entries {
        if e.data.len() != e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "entry {} does not match its shape {:?}",
                e.name, e.shape
            )));
        }
        manifest.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        manifest.extend_from_slice(e.name.as_bytes());
        manifest.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            manifest.extend_from_slice(&(d as u64).to_le_bytes());
        }
        manifest.extend_from_slice(&offset.to_le_bytes());
        offset += e.data.len() as u64;
    }
    let mut out = Vec::with_capacity(24 + manifest.len() + offset as usize * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for e in entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(16)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let man_len = c.u64()? as usize;
    let data_start = 24usize
        .checked_add(man_len)
        .filter(|&s| s <= buf.len())
        .ok_or_else(|| Error::Checkpoint("manifest length exceeds file".into()))?;
    let count = c.u32()?;
    let mut heads = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let offset = c.u64()? as usize;
        heads.push((name, shape, offset));
    }
    if c.pos != data_start {
        return Err(Error::Checkpoint("manifest length mismatch".into()));
    }
    let data = &buf[data_start..];
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint(
            "data block is not a whole number of f64 values".into(),
        ));
    }
    let total = data.len() / 8;
    let mut entries = Vec::with_capacity(heads.len());
    for (name, shape, offset) in heads {
        let n: usize = shape.iter().product();
        if offset.checked_add(n).is_none_or(|end| end > total) {
            return Err(Error::Checkpoint(format!(
                "entry {name} extends past the data block"
            )));
        }
        let values = data[offset * 8..(offset + n) * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            name,
            shape,
            data: values,
        });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
