//! Binary tensor container.
//!
//! ```text
//! "RAPQ" | version u32 | count u32
//! count × { name_len u32 | name | dtype u32 (0 = f32) | rank u32 | extents u32… | offset u64 }
//! payloads, little-endian f32, each starting at a 64-byte aligned offset
//! ```
//!
//! Integers are little-endian and offsets are absolute.

use std::collections::BTreeMap;
use std::path::Path;

use repapq_core::graph::ModelGraph;
use repapq_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RAPQ";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const DTYPE_F32: u32 = 0;

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let table: usize = tensors
        .iter()
        .map(|(name, t)| 4 + name.len() + 8 + 4 * t.rank() + 8)
        .sum();
    let mut offsets = Vec::with_capacity(tensors.len());
    let mut at = align_up(12 + table);
    for (_, t) in tensors {
        offsets.push(at);
        at = align_up(at + 4 * t.len());
    }
    let mut out = Vec::with_capacity(at);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, t), &off) in tensors.iter().zip(&offsets) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(off as u64).to_le_bytes());
    }
    for ((_, t), &off) in tensors.iter().zip(&offsets) {
        out.resize(off, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(self.path, format!("unexpected end of file at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "RAPQ",
            found,
        });
    }
    let mut c = Cursor { bytes, at: 4, path };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::malformed(path, "tensor name is not UTF-8"))?
            .to_string();
        let dtype = c.u32()?;
        if dtype != DTYPE_F32 {
            return Err(Error::malformed(path, format!("tensor {name:?}: unsupported dtype {dtype}")));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(c.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        if !offset.is_multiple_of(ALIGN) {
            return Err(Error::malformed(path, format!("tensor {name:?}: offset {offset} is not {ALIGN}-byte aligned")));
        }
        entries.push((name, shape, offset));
    }
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for (name, shape, offset) in entries {
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::malformed(path, format!("duplicate tensor {name:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut p = Cursor { bytes, at: offset, path };
        let raw = p.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::malformed(path, format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn save_weights(graph: &ModelGraph, path: &Path) -> Result<()> {
    write_tensors(path, &graph.named_tensors())
}

/// Fills every named tensor of `graph` from the file. Extra tensors in
/// the file are ignored.
pub fn load_weights(graph: &mut ModelGraph, path: &Path) -> Result<()> {
    let file: BTreeMap<String, Tensor> = read_tensors(path)?.into_iter().collect();
    assign_checked(graph, &file)
}

pub fn assign_checked(graph: &mut ModelGraph, file: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in graph.named_tensors() {
        match file.get(&name) {
            None => return Err(Error::MissingTensor(name)),
            Some(f) if f.shape() != t.shape() => {
                return Err(Error::TensorShape {
                    name,
                    expected: t.shape().to_vec(),
                    got: f.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    graph.assign_tensors(file)?;
    Ok(())
}
