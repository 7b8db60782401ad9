//! Self-describing binary checkpoint.
//!
//! ```text
//! magic    b"OMMX"
//! version  u32 LE
//! config   u32 LE length, then the model config as TOML
//! count    u32 LE
//! per tensor:
//!   name_len u32 LE, name (UTF-8)
//!   dtype    u8 (0 = f32)
//!   rank     u32 LE, then rank x u64 LE dims
//!   offset   u64 LE, absolute byte offset of the payload
//! payloads  little-endian f32 values, in table order
//! checksum  u64 LE, CRC-64/XZ of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const MAGIC: [u8; 4] = *b"OMMX";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let config = toml::to_string(&model.config)
        .map_err(|e| Error::Malformed(format!("config serialization: {e}")))?;
    let entries = model.store.entries();

    let mut header = Vec::new();
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(config.len() as u32).to_le_bytes());
    header.extend_from_slice(config.as_bytes());
    header.extend_from_slice(&(entries.len() as u32).to_le_bytes());

    let table_len: usize = entries
        .iter()
        .map(|e| 4 + e.name.len() + 1 + 4 + 8 * e.shape.len() + 8)
        .sum();
    let mut offset = (header.len() + table_len) as u64;
    for e in entries {
        header.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        header.extend_from_slice(e.name.as_bytes());
        header.push(DTYPE_F32);
        header.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * e.value.len() as u64;
    }
    let mut out = header;
    for e in entries {
        for v in &e.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = CRC64.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let short = || Error::Truncated(format!("header ends at byte {}", self.buf.len()));
        let end = self.pos.checked_add(n).ok_or_else(short)?;
        let s = self.buf.get(self.pos..end).ok_or_else(short)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 8 + 8 {
        return Err(Error::Truncated("no room for the checksum".into()));
    }
    let body_len = bytes.len() - 8;
    let clen = r.u32()? as usize;
    let config_bytes = r.take(clen)?;
    let count = r.u32()? as usize;

    struct Desc {
        name: String,
        shape: Vec<usize>,
        offset: usize,
        len: usize,
    }
    let mut descs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Malformed(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Malformed(format!("tensor {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("tensor {name}: size overflow")))?;
        descs.push(Desc {
            name,
            shape,
            offset,
            len,
        });
    }
    let payload_end = descs
        .iter()
        .map(|d| d.offset.saturating_add(d.len.saturating_mul(4)))
        .max()
        .unwrap_or(r.pos)
        .max(r.pos);
    if payload_end > body_len {
        return Err(Error::Truncated(format!(
            "payload needs {} bytes, file has {}",
            payload_end + 8,
            bytes.len()
        )));
    }
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = CRC64.checksum(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if payload_end != body_len {
        return Err(Error::Malformed(format!(
            "{} unexpected bytes before the checksum",
            body_len - payload_end
        )));
    }

    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::Malformed("config is not UTF-8".into()))?;
    let config: ModelConfig = toml::from_str(config_text)
        .map_err(|e| Error::Malformed(format!("config: {e}")))?;
    let mut store = ParamStore::new();
    for d in descs {
        if d.offset < r.pos {
            return Err(Error::Malformed(format!("tensor {} overlaps the header", d.name)));
        }
        let raw = &bytes[d.offset..d.offset + 4 * d.len];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (rows, cols) = match d.shape[..] {
            [n] => (1, n),
            [a, b] => (a, b),
            _ => unreachable!(),
        };
        if store.id(&d.name).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {}", d.name)));
        }
        store.insert(d.name, d.shape, Mat::from_vec(rows, cols, data)?);
    }
    Model::from_store(config, store)
}

/// Writes through a temporary sibling so a crash never leaves a partial file.
pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    decode(&fs::read(path)?)
}
