//! `PRER` raster and `PREL` mask files: 4-byte magic, u32 LE version, u32 LE
//! extents, then a little-endian row-major payload.

use std::fs;
use std::path::Path;

use super::{LabelMask, Raster};
use crate::error::{Error, Result};
use crate::util::{atomic_write, checked_extent, Reader};

pub const RASTER_MAGIC: [u8; 4] = *b"PRER";
pub const MASK_MAGIC: [u8; 4] = *b"PREL";
const VERSION: u32 = 1;

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v}")))
}

pub fn encode_raster(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + r.values.len() * 4);
    out.extend_from_slice(&RASTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(r.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(r.width, "width")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(r.bands, "bands")?.to_le_bytes());
    for v in &r.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let mut rd = Reader::new(bytes);
    rd.magic(&RASTER_MAGIC)?;
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (h, w, c) = (rd.u32("height")?, rd.u32("width")?, rd.u32("bands")?);
    let n = checked_extent(&[h, w, c], "raster")?;
    let nbytes = n.checked_mul(4).ok_or_else(|| Error::DimensionOverflow("raster payload".into()))?;
    let payload = rd.take(nbytes, "raster payload")?;
    rd.finish("raster")?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Raster::new(h as usize, w as usize, c as usize, values)
}

pub fn encode_mask(m: &LabelMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + m.classes.len() * 2);
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.width, "width")?.to_le_bytes());
    for v in &m.classes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelMask> {
    let mut rd = Reader::new(bytes);
    rd.magic(&MASK_MAGIC)?;
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (h, w) = (rd.u32("height")?, rd.u32("width")?);
    let n = checked_extent(&[h, w], "mask")?;
    let nbytes = n.checked_mul(2).ok_or_else(|| Error::DimensionOverflow("mask payload".into()))?;
    let payload = rd.take(nbytes, "mask payload")?;
    rd.finish("mask")?;
    let classes = payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    LabelMask::new(h as usize, w as usize, classes)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    atomic_write(path, &encode_raster(r)?)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    decode_raster(&fs::read(path)?)
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    atomic_write(path, &encode_mask(m)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    decode_mask(&fs::read(path)?)
}
