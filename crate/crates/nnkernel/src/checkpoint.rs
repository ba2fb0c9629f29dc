//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "SRGCKPT\0"
//! version    u32 LE
//! count      u32 LE
//! count × { name_len u32, name utf-8, rank u32, extents u64 × rank, payload f32 LE }
//! metadata   JSON bytes
//! meta_len   u64 LE
//! trailer    8 bytes  "SRGMETA\0"
//! ```
//!
//! The metadata block sits at the end behind a fixed-size footer so it can
//! be read without decoding any tensor payload.

use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SRGCKPT\0";
pub const TRAILER: &[u8; 8] = b"SRGMETA\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParameterStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(TRAILER);
    Ok(buf)
}

pub fn save_checkpoint(params: &ParameterStore, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, serde_json::Value)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Reads only the metadata footer.
pub fn read_checkpoint_meta(path: &Path) -> Result<serde_json::Value> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head).map_err(|_| NnError::Corrupt("file shorter than magic".into()))?;
    check_magic(&head)?;
    let size = f.seek(SeekFrom::End(0))?;
    if size < 32 {
        return Err(NnError::Corrupt("file too short for footer".into()));
    }
    f.seek(SeekFrom::End(-16))?;
    let mut footer = [0u8; 16];
    f.read_exact(&mut footer)?;
    if &footer[8..] != TRAILER {
        return Err(NnError::Corrupt("missing metadata trailer".into()));
    }
    let len = u64::from_le_bytes(footer[..8].try_into().unwrap());
    if len > size - 32 {
        return Err(NnError::Corrupt(format!("metadata length {len} exceeds file")));
    }
    f.seek(SeekFrom::End(-16 - len as i64))?;
    let mut meta = vec![0u8; len as usize];
    f.read_exact(&mut meta)?;
    Ok(serde_json::from_slice(&meta)?)
}

fn check_magic(head: &[u8]) -> Result<()> {
    if head != MAGIC {
        return Err(NnError::Version(format!("bad magic {:?}", String::from_utf8_lossy(head))));
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Corrupt(format!("truncated while reading {what} at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterStore, serde_json::Value)> {
    if bytes.len() < 8 {
        return Err(NnError::Corrupt("file shorter than magic".into()));
    }
    check_magic(&bytes[..8])?;
    let mut c = Cursor { buf: bytes, pos: 8 };
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(NnError::Version(format!(
            "checkpoint format {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = c.u32("parameter count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| NnError::Corrupt(format!("parameter name: {e}")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(NnError::Corrupt(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c.take(n.checked_mul(4).ok_or_else(|| NnError::Corrupt("extent overflow".into()))?, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store
            .insert(name.clone(), Tensor::new(&shape, data)?)
            .map_err(|_| NnError::Corrupt(format!("duplicate parameter `{name}`")))?;
    }
    let rest = bytes.len() - c.pos;
    if rest < 16 {
        return Err(NnError::Corrupt("truncated metadata footer".into()));
    }
    let footer = &bytes[bytes.len() - 16..];
    if &footer[8..] != TRAILER {
        return Err(NnError::Corrupt("missing metadata trailer".into()));
    }
    let meta_len = u64::from_le_bytes(footer[..8].try_into().unwrap()) as usize;
    if meta_len != rest - 16 {
        return Err(NnError::Corrupt(format!(
            "metadata length {meta_len} disagrees with {} remaining bytes",
            rest - 16
        )));
    }
    let meta = serde_json::from_slice(c.take(meta_len, "metadata")?)?;
    Ok((store, meta))
}
