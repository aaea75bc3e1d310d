//! Disk entry layout:
//!
//! ```text
//! magic[16] | template_len u16 | template utf8 | block u32 | step u32 |
//! variant u8 | blob_len u64 | blob | sha256(key record ++ blob)[32]
//! ```
//!
//! Integers are little-endian.

use sha2::{Digest, Sha256};

use super::EntryKey;
use crate::error::{Error, Result};
use crate::latmodel::CacheVariant;

pub const MAGIC: [u8; 16] = *b"maskserve-act\0v1";
const DIGEST_LEN: usize = 32;

pub fn blob_digest(blob: &[u8]) -> [u8; 32] {
    Sha256::digest(blob).into()
}

fn variant_tag(v: CacheVariant) -> u8 {
    match v {
        CacheVariant::Y => 0,
        CacheVariant::Kv => 1,
    }
}

pub(crate) fn key_record(key: &EntryKey) -> Vec<u8> {
    let t = key.template_id.as_bytes();
    let mut out = Vec::with_capacity(2 + t.len() + 9);
    out.extend_from_slice(&(t.len() as u16).to_le_bytes());
    out.extend_from_slice(t);
    out.extend_from_slice(&key.block.to_le_bytes());
    out.extend_from_slice(&key.step.to_le_bytes());
    out.push(variant_tag(key.variant));
    out
}

/// File name for an entry: hex of the key record's digest.
pub fn file_name(key: &EntryKey) -> String {
    let d = Sha256::digest(key_record(key));
    format!("{}.act", hex::encode(&d[..16]))
}

pub fn encode_entry(key: &EntryKey, blob: &[u8]) -> Result<Vec<u8>> {
    if key.template_id.len() > u16::MAX as usize {
        return Err(Error::invalid("template id longer than 65535 bytes"));
    }
    let rec = key_record(key);
    let mut out = Vec::with_capacity(MAGIC.len() + rec.len() + 8 + blob.len() + DIGEST_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&rec);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
    let mut h = Sha256::new();
    h.update(&rec);
    h.update(blob);
    out.extend_from_slice(&h.finalize());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("entry truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses and verifies an entry file.
pub fn decode_entry(bytes: &[u8]) -> Result<(EntryKey, Vec<u8>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let rec_start = r.pos;
    let tlen = r.u16()? as usize;
    let template_id = std::str::from_utf8(r.take(tlen)?)
        .map_err(|_| Error::Integrity("template id is not utf-8".into()))?
        .to_owned();
    let block = r.u32()?;
    let step = r.u32()?;
    let variant = match r.take(1)?[0] {
        0 => CacheVariant::Y,
        1 => CacheVariant::Kv,
        t => return Err(Error::Integrity(format!("unknown variant tag {t}"))),
    };
    let rec_end = r.pos;
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Integrity("blob too large".into()))?;
    let blob = r.take(len)?;
    let footer = r.take(DIGEST_LEN)?;
    if r.pos != bytes.len() {
        return Err(Error::Integrity("trailing bytes after footer".into()));
    }
    let mut h = Sha256::new();
    h.update(&bytes[rec_start..rec_end]);
    h.update(blob);
    if h.finalize().as_slice() != footer {
        return Err(Error::Integrity("digest mismatch".into()));
    }
    Ok((
        EntryKey {
            template_id,
            block,
            step,
            variant,
        },
        blob.to_vec(),
    ))
}
