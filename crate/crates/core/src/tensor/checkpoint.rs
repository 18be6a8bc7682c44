//! Flat binary parameter checkpoints.
//!
//! Layout: the magic bytes `CATF1`, then for each parameter in lexicographic
//! name order: name length (u32 LE), UTF-8 name, rank (u32 LE), each dim
//! (u32 LE), and the values as 32-bit LE floats.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CATF1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                line: 0,
                offset: self.pos as u64,
                message: format!("checkpoint truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format {
            line: 0,
            offset: 0,
            message: "missing CATF1 magic".into(),
        });
    }
    let mut params = BTreeMap::new();
    while cur.pos < bytes.len() {
        let start = cur.pos as u64;
        let name_len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                line: 0,
                offset: start,
                message: format!("parameter name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = cur.u32("rank")?;
        let shape = (0..rank).map(|_| cur.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            line: 0,
            offset: start,
            message: e.to_string(),
        })?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Format {
                line: 0,
                offset: start,
                message: format!("duplicate parameter {name}"),
            });
        }
    }
    Ok(params)
}
