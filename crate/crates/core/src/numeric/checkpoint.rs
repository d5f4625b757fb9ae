//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RNESCKPT" | version u32 | tensor count u32
//! per tensor: name length u32 | name bytes | rank u32 | dims u64 * rank | values f64 * numel
//! ```

use std::fs;
use std::path::Path;

use super::{NumericError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"RNESCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.num_values() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], NumericError> {
        if self.bytes.len() - self.pos < n {
            return Err(NumericError::Corrupt(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NumericError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, NumericError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, NumericError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(NumericError::Corrupt("header (bad magic)".into()));
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(NumericError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("header")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let label = format!("tensor #{i}");
        let name_len = r.u32(&label)? as usize;
        let name = String::from_utf8(r.take(name_len, &label)?.to_vec())
            .map_err(|_| NumericError::Corrupt(format!("{label} (name is not UTF-8)")))?;
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NumericError::Corrupt(name.clone()))?;
        let raw = r.take(numel.saturating_mul(8), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| NumericError::Corrupt(name.clone()))?;
        store.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(NumericError::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<(), NumericError> {
    fs::write(path, encode_checkpoint(params)).map_err(|source| NumericError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NumericError> {
    let bytes = fs::read(path).map_err(|source| NumericError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
