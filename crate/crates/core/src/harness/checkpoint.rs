//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CI2P" | version u32 | entry count u32
//! per entry: name_len u32 | name (UTF-8) | dtype u8 | rank u8 | dims u64 × rank | payload
//! CRC32 of every preceding byte, u32
//! ```
//!
//! Entries are written in name order. Only values are stored; a loaded
//! store marks everything trainable and callers re-apply freezing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CI2P";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, entry) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(entry.value.rank() as u8);
        for &d in entry.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointFormat(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::CheckpointFormat(format!(
            "file is {} bytes, too short for a checkpoint",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic, not a CI2P checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CheckpointCrc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CheckpointFormat("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::CheckpointFormat(format!("'{name}': unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::CheckpointFormat(format!(
                "'{name}' is stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n.checked_mul(dtype.size()).is_some())
            .ok_or_else(|| Error::CheckpointFormat(format!("'{name}': dims {dims:?} overflow")))?;
        let payload = r.take(n * dtype.size())?;
        let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
        let t = Tensor::new(&dims, data)
            .map_err(|e| Error::CheckpointFormat(format!("'{name}': {e}")))?;
        store
            .insert(name.clone(), t, false)
            .map_err(|_| Error::CheckpointFormat(format!("duplicate entry '{name}'")))?;
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after the last entry",
            body.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
