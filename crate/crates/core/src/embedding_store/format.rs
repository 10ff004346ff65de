//! Binary container for [`EmbeddingStore`].
//!
//! Little-endian layout:
//!
//! ```text
//! "RAPS" | version u16 | flags u16 | dim u32 | count u64
//! | count x (len u16, utf-8 id bytes)
//! | count x dim f32 (row-major)
//! | crc32 u32 over every preceding byte
//! ```
//!
//! Flag bit 0 marks a normalized store. Other bits must be zero.

use std::collections::HashSet;

use super::{EmbeddingStore, StoreError};

pub const MAGIC: [u8; 4] = *b"RAPS";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_NORMALIZED: u16 = 1;
const HEADER_LEN: usize = 20;
const CRC_LEN: usize = 4;

pub fn encode_store(store: &EmbeddingStore) -> Vec<u8> {
    let id_bytes: usize = store.ids().iter().map(|id| 2 + id.len()).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + id_bytes + store.as_slice().len() * 4 + CRC_LEN);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if store.is_normalized() { FLAG_NORMALIZED } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for id in store.ids() {
        // ids longer than u16::MAX are rejected when the store is built from a file;
        // in-memory stores with such ids cannot be persisted faithfully.
        assert!(id.len() <= u16::MAX as usize, "id longer than 65535 bytes");
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for x in store.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(StoreError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            }),
        }
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(StoreError::MalformedHeader {
            offset: 0,
            reason: "missing RAPS magic".into(),
        });
    }
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(StoreError::Truncated {
            offset: bytes.len(),
            needed: HEADER_LEN + CRC_LEN - bytes.len(),
        });
    }
    let body_len = bytes.len() - CRC_LEN;
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 4,
    };

    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion { offset: 4, version });
    }
    let flags = r.u16()?;
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(StoreError::MalformedHeader {
            offset: 6,
            reason: format!("unknown flag bits {flags:#06x}"),
        });
    }
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(StoreError::MalformedHeader {
            offset: 8,
            reason: "dim is zero".into(),
        });
    }
    let count = r.u64()?;
    let count = usize::try_from(count).map_err(|_| StoreError::ShapeMismatch {
        offset: 12,
        reason: format!("count {count} does not fit in memory"),
    })?;

    // Every id entry needs at least its two length bytes.
    let mut ids = Vec::with_capacity(count.min(body_len / 2));
    let mut seen = HashSet::with_capacity(ids.capacity());
    for _ in 0..count {
        let entry_offset = r.pos;
        let len = r.u16()? as usize;
        if len == 0 {
            return Err(StoreError::InvalidId {
                offset: entry_offset,
                reason: "empty id".into(),
            });
        }
        let raw = r.take(len)?;
        let id = std::str::from_utf8(raw).map_err(|e| StoreError::InvalidId {
            offset: entry_offset + 2,
            reason: e.to_string(),
        })?;
        if !seen.insert(id) {
            return Err(StoreError::DuplicateId {
                offset: entry_offset,
                id: id.to_owned(),
            });
        }
        ids.push(id.to_owned());
    }

    let payload_offset = r.pos;
    let values = count
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| StoreError::ShapeMismatch {
            offset: 8,
            reason: format!("count {count} x dim {dim} overflows"),
        })?;
    let payload = r.take(values)?;
    if r.pos != body_len {
        return Err(StoreError::ShapeMismatch {
            offset: r.pos,
            reason: format!(
                "{} trailing bytes after {count} x {dim} payload starting at byte {payload_offset}",
                body_len - r.pos
            ),
        });
    }

    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(StoreError::Checksum {
            offset: body_len,
            stored,
            computed,
        });
    }

    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingStore::new(ids, dim, data, flags & FLAG_NORMALIZED != 0)
}
