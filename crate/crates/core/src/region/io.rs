//! Partition and raw-mask files.
//!
//! `RATM` (partition): magic, version `u32 = 1`, `H: u64`, `W: u64`,
//! `L: u32`, then `H·W` labels as `u16`, row-major. All little-endian.
//!
//! `RATS` (raw segmenter masks): magic, `count: u32`, `H: u64`, `W: u64`,
//! then each mask as `H` rows of `ceil(W/8)` bytes, most significant bit
//! first, padding bits zero.

use std::path::Path;

use super::{MaskSet, RegionPartition};
use crate::error::{Error, Result};

pub const PARTITION_MAGIC: &[u8; 4] = b"RATM";
pub const PARTITION_VERSION: u32 = 1;
pub const MASKS_MAGIC: &[u8; 4] = b"RATS";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: need {n} bytes for {what} at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn dims(h: u64, w: u64) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h.saturating_mul(w) > (1 << 32) {
        return Err(Error::Format(format!("implausible size {h}x{w}")));
    }
    Ok((h as usize, w as usize))
}

pub fn encode_partition(p: &RegionPartition) -> Result<Vec<u8>> {
    if p.num_regions() > u16::MAX as usize + 1 {
        return Err(Error::Format(format!(
            "{} regions do not fit u16 labels",
            p.num_regions()
        )));
    }
    let mut out = Vec::with_capacity(28 + 2 * p.labels().len());
    out.extend_from_slice(PARTITION_MAGIC);
    out.extend_from_slice(&PARTITION_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.height() as u64).to_le_bytes());
    out.extend_from_slice(&(p.width() as u64).to_le_bytes());
    out.extend_from_slice(&(p.num_regions() as u32).to_le_bytes());
    for &l in p.labels() {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    Ok(out)
}

/// Parses a partition without checking label ranges, so a corrupt file can
/// still be inspected with [`RegionPartition::validate`].
pub fn decode_partition_unchecked(bytes: &[u8]) -> Result<RegionPartition> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != PARTITION_MAGIC {
        return Err(Error::Format("bad partition magic".into()));
    }
    let version = c.u32("version")?;
    if version != PARTITION_VERSION {
        return Err(Error::Format(format!(
            "unsupported partition version {version}"
        )));
    }
    let (h, w) = dims(c.u64("height")?, c.u64("width")?)?;
    let l = c.u32("region count")? as usize;
    let raw = c.take(2 * h * w, "labels")?;
    c.finish()?;
    let labels = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
        .collect();
    Ok(RegionPartition::from_raw(h, w, labels, l))
}

pub fn decode_partition(bytes: &[u8]) -> Result<RegionPartition> {
    let p = decode_partition_unchecked(bytes)?;
    p.validate()?;
    Ok(p)
}

pub fn save_partition(path: &Path, p: &RegionPartition) -> Result<()> {
    std::fs::write(path, encode_partition(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_partition_unchecked(path: &Path) -> Result<RegionPartition> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_partition_unchecked(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_partition(path: &Path) -> Result<RegionPartition> {
    let p = load_partition_unchecked(path)?;
    p.validate()
        .map_err(|v| Error::Violation(format!("{}: {v}", path.display())))?;
    Ok(p)
}

pub fn encode_masks(ms: &MaskSet) -> Vec<u8> {
    let (h, w) = (ms.height(), ms.width());
    let row_bytes = w.div_ceil(8);
    let mut out = Vec::with_capacity(24 + ms.len() * h * row_bytes);
    out.extend_from_slice(MASKS_MAGIC);
    out.extend_from_slice(&(ms.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u64).to_le_bytes());
    out.extend_from_slice(&(w as u64).to_le_bytes());
    for m in ms.masks() {
        for row in m.chunks(w) {
            let mut packed = vec![0u8; row_bytes];
            for (j, &b) in row.iter().enumerate() {
                if b {
                    packed[j / 8] |= 0x80 >> (j % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
    }
    out
}

pub fn decode_masks(bytes: &[u8]) -> Result<MaskSet> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MASKS_MAGIC {
        return Err(Error::Format("bad mask-set magic".into()));
    }
    let count = c.u32("count")? as usize;
    let (h, w) = dims(c.u64("height")?, c.u64("width")?)?;
    let row_bytes = w.div_ceil(8);
    let mut masks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let raw = c.take(h * row_bytes, "mask bits")?;
        let mut m = Vec::with_capacity(h * w);
        for row in raw.chunks_exact(row_bytes) {
            for j in 0..w {
                m.push(row[j / 8] & (0x80 >> (j % 8)) != 0);
            }
        }
        masks.push(m);
    }
    c.finish()?;
    MaskSet::new(h, w, masks)
}

pub fn save_masks(path: &Path, ms: &MaskSet) -> Result<()> {
    std::fs::write(path, encode_masks(ms)).map_err(|e| Error::io(path, e))
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_masks(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
