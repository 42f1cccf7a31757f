//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DNETv1"
//! u32 header_len, header_len bytes of UTF-8 (key=value lines)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u64 dims, f64 data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{DreamError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DNETv1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.header.len());
        out.extend_from_slice(self.header.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; errors are plain messages for the caller to
    /// attach a path to.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("bad magic (expected DNETv1)".into());
        }
        let hlen = r.u32()?;
        let header = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()?;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|e| e.to_string())?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|msg| DreamError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
