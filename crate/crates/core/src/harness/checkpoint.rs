//! Binary checkpoint format.
//!
//! ```text
//! 0   magic          8 bytes  "DAVECKPT"
//! 8   version        u16 LE   (FORMAT_VERSION)
//! 10  reserved       u16 LE   (0)
//! 12  metadata_len   u32 LE
//! 16  tensor_count   u32 LE
//! 20  metadata       metadata_len bytes of JSON (object of string → string, keys sorted)
//!     tensor table   tensor_count records, sorted by name:
//!                      name_len u16, name (UTF-8), dtype u8 (0 = f32), ndim u8,
//!                      dims ndim × u64, payload_offset u64, payload_len u64
//!     payloads       little-endian f32, each starting at a 64-byte aligned
//!                    absolute offset; gaps are zero-filled
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DAVECKPT";
pub const FORMAT_VERSION: u16 = 1;
pub const PAYLOAD_ALIGN: usize = 64;
const DTYPE_F32: u8 = 0;

struct Entry<'a> {
    name: &'a str,
    tensor: &'a Tensor,
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(store.metadata())?;
    let entries: Vec<Entry> = store
        .iter()
        .map(|(name, tensor)| Entry { name, tensor })
        .collect();

    let mut table_len = 0usize;
    for e in &entries {
        if e.name.len() > u16::MAX as usize || e.tensor.ndim() > u8::MAX as usize {
            return Err(Error::Format {
                offset: 0,
                reason: format!("tensor `{}` cannot be represented", e.name),
            });
        }
        table_len += 2 + e.name.len() + 2 + 8 * e.tensor.ndim() + 16;
    }
    let header_len = 20 + meta.len() + table_len;

    let mut offsets = Vec::with_capacity(entries.len());
    let mut cursor = align(header_len);
    for e in &entries {
        offsets.push(cursor);
        cursor = align(cursor + 4 * e.tensor.len());
    }

    let mut out = Vec::with_capacity(cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (e, &off) in entries.iter().zip(&offsets) {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.tensor.ndim() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(off as u64).to_le_bytes());
        out.extend_from_slice(&((4 * e.tensor.len()) as u64).to_le_bytes());
    }
    for (e, &off) in entries.iter().zip(&offsets) {
        out.resize(off, 0);
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn align(n: usize) -> usize {
    n.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(
            8,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    r.u16("reserved")?;
    let meta_len = r.u32("metadata length")? as usize;
    let count = r.u32("tensor count")? as usize;
    let meta_at = r.pos;
    let meta: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| format_err(meta_at, format!("metadata is not a string map: {e}")))?;

    let mut store = ParamStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format_err(at, "name is not UTF-8"))?
            .to_string();
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(format_err(
                at,
                format!("tensor `{name}` out of order or duplicated"),
            ));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(format_err(r.pos - 1, format!("unknown dtype tag {dtype}")));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let off_at = r.pos;
        let offset = r.u64("payload offset")? as usize;
        let len = r.u64("payload length")? as usize;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(4)) != Some(len) {
            return Err(format_err(
                off_at,
                format!("payload length {len} does not match shape {shape:?}"),
            ));
        }
        if !offset.is_multiple_of(PAYLOAD_ALIGN) {
            return Err(format_err(
                off_at,
                format!("payload offset {offset} is not {PAYLOAD_ALIGN}-byte aligned"),
            ));
        }
        if offset.checked_add(len).is_none_or(|end| end > buf.len()) {
            return Err(format_err(
                buf.len(),
                format!("truncated payload for `{name}`"),
            ));
        }
        let data = buf[offset..offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| format_err(at, e.to_string()))?;
        store.insert(name.clone(), tensor)?;
        prev = Some(name);
    }
    store.set_metadata(meta);
    Ok(store)
}

/// Writes through a sibling temporary file so a failed save never leaves a
/// partial checkpoint at `path`.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "b.bias",
            Tensor::new(vec![3], vec![1.0, -0.0, f32::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        s.insert(
            "a.weight",
            Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        )
        .unwrap();
        s.set_meta("role", "encoder");
        s.set_meta("seed", "7");
        s
    }

    #[test]
    fn payloads_are_aligned_and_sorted() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["a.weight", "b.bias"]);
        assert_eq!(back, sample());
        // -0.0 survives bit-exactly
        assert_eq!(
            back.get("b.bias").unwrap().data()[1].to_bits(),
            (-0.0f32).to_bits()
        );
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: {:?}", other.map(|s| s.len())),
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(Error::Format { offset: 8, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
