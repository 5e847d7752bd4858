//! Binary tile store written by `prepare` and read by training.
//!
//! Layout: `"GHTS"`, little-endian `u32` version, tile count, channels and
//! tile size; then per tile `u32` raster id, x0, y0, the `f32` channel
//! planes and one byte per mask pixel. Weight maps are not stored; they are
//! recomputed from the masks on load.

use super::tiling::{TileOrigin, TileRecord};
use super::Mask;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::metrics::WeightMapConfig;
use rayon::prelude::*;
use std::path::Path;

pub const STORE_MAGIC: &[u8; 4] = b"GHTS";
pub const STORE_VERSION: u32 = 1;

pub fn encode_tiles(tiles: &[TileRecord]) -> Result<Vec<u8>> {
    let (channels, size) = tiles.first().map_or((0, 0), |t| (t.channels, t.size));
    if tiles.iter().any(|t| t.channels != channels || t.size != size) {
        return Err(Error::invalid("tile store", "tiles differ in channel count or size"));
    }
    let mut w = Writer::default();
    w.raw(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u32(tiles.len() as u32);
    w.u32(channels as u32);
    w.u32(size as u32);
    for t in tiles {
        w.u32(t.origin.raster);
        w.u32(t.origin.x0);
        w.u32(t.origin.y0);
        w.f32s(&t.data);
        w.raw(&t.mask.data);
    }
    Ok(w.buf)
}

pub fn decode_tiles(bytes: &[u8], weights: &WeightMapConfig) -> Result<Vec<TileRecord>> {
    let mut rd = Reader::new(bytes, "tile store");
    rd.magic(STORE_MAGIC)?;
    let version = rd.u32()?;
    if version != STORE_VERSION {
        return Err(rd.fail(format!("unsupported version {version}")));
    }
    let count = rd.u32()? as usize;
    let channels = rd.u32()? as usize;
    let size = rd.u32()? as usize;
    let mut tiles = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let origin = TileOrigin {
            raster: rd.u32()?,
            x0: rd.u32()?,
            y0: rd.u32()?,
        };
        let data = rd.f32s(channels * size * size)?;
        let at = rd.offset();
        let mask_bytes = rd.bytes(size * size)?;
        if mask_bytes.iter().any(|&v| v > 1) {
            return Err(Error::Parse {
                what: "tile store",
                offset: at,
                detail: "mask bytes must be 0 or 1".into(),
            });
        }
        tiles.push(TileRecord {
            size,
            channels,
            data,
            mask: Mask {
                width: size,
                height: size,
                data: mask_bytes.to_vec(),
            },
            weights: Vec::new(),
            origin,
            positive_rate: 0.0,
        });
    }
    rd.finish()?;
    tiles.par_iter_mut().for_each(|t| t.refresh_labels(weights));
    Ok(tiles)
}

pub fn write_tiles(tiles: &[TileRecord], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_tiles(tiles)?)
}

pub fn read_tiles(path: impl AsRef<Path>, weights: &WeightMapConfig) -> Result<Vec<TileRecord>> {
    decode_tiles(&read_file(path.as_ref())?, weights)
}
