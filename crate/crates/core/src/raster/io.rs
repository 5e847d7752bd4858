//! Raster container and PGM/PPM previews.
//!
//! Layout: `"GHSR"`, then little-endian `u32` version, width, height, bands
//! and dtype code (0 = u16, 1 = f32), six `f64` affine coefficients, then
//! the band planes one after another.

use super::{Affine, Mask, Raster, Samples};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use std::path::Path;

pub const RASTER_MAGIC: &[u8; 4] = b"GHSR";
pub const RASTER_VERSION: u32 = 1;

pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(RASTER_MAGIC);
    w.u32(RASTER_VERSION);
    w.u32(r.width as u32);
    w.u32(r.height as u32);
    w.u32(r.bands as u32);
    w.u32(match r.samples {
        Samples::U16(_) => 0,
        Samples::F32(_) => 1,
    });
    for c in r.transform.0 {
        w.f64(c);
    }
    match &r.samples {
        Samples::U16(v) => w.u16s(v),
        Samples::F32(v) => w.f32s(v),
    }
    w.buf
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let mut rd = Reader::new(bytes, "raster");
    rd.magic(RASTER_MAGIC)?;
    let version = rd.u32()?;
    if version != RASTER_VERSION {
        return Err(rd.fail(format!("unsupported version {version}")));
    }
    let width = rd.u32()? as usize;
    let height = rd.u32()? as usize;
    let bands = rd.u32()? as usize;
    let dtype = rd.u32()?;
    let mut coef = [0.0; 6];
    for c in &mut coef {
        *c = rd.f64()?;
    }
    let transform = Affine(coef);
    if !transform.is_invertible() {
        return Err(rd.fail("affine transform is not invertible"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(bands))
        .ok_or_else(|| rd.fail("dimensions overflow"))?;
    let samples = match dtype {
        0 => Samples::U16(rd.u16s(n)?),
        1 => Samples::F32(rd.f32s(n)?),
        d => return Err(rd.fail(format!("unknown dtype code {d}"))),
    };
    rd.finish()?;
    Ok(Raster {
        width,
        height,
        bands,
        samples,
        transform,
    })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    decode_raster(&read_file(path.as_ref())?)
}

pub fn write_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_raster(raster))
}

fn to_byte(v: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit greyscale preview of one plane, linearly mapped from `[lo, hi]`.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, plane: &[f32], lo: f32, hi: f32) -> Result<()> {
    if plane.len() != width * height {
        return Err(Error::invalid("pgm plane", "length does not match extent"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| to_byte(v, lo, hi)));
    write_file(path.as_ref(), &out)
}

pub fn write_mask_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let plane: Vec<f32> = mask.data.iter().map(|&v| v as f32).collect();
    write_pgm(path, mask.width, mask.height, &plane, 0.0, 1.0)
}

/// Colour preview from three bands of a raster.
pub fn write_ppm(path: impl AsRef<Path>, raster: &Raster, bands: [usize; 3], lo: f32, hi: f32) -> Result<()> {
    if bands.iter().any(|&b| b >= raster.bands) {
        return Err(Error::invalid("ppm bands", format!("raster has {} bands", raster.bands)));
    }
    let planes: Vec<Vec<f32>> = bands.iter().map(|&b| raster.band_f32(b)).collect();
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    for i in 0..raster.plane_len() {
        for p in &planes {
            out.push(to_byte(p[i], lo, hi));
        }
    }
    write_file(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster {
        let data: Vec<u16> = (0..2 * 3 * 4).map(|i| (i * 171 % 4096) as u16).collect();
        let mut r = Raster::new_u16(3, 2, 4, data, Affine([10.0, 0.5, 0.0, 20.0, 0.0, -0.5])).unwrap();
        if let Samples::U16(v) = &mut r.samples {
            v[5] = 4095;
        }
        r
    }

    #[test]
    fn u16_round_trip_is_bitwise() {
        let r = sample();
        let back = decode_raster(&encode_raster(&r)).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.band_u16(0).unwrap()[5], 4095);
    }

    #[test]
    fn f32_round_trip_is_bitwise() {
        let data = vec![f32::MIN_POSITIVE, -0.0, 1.0e-30, 3.25];
        let r = Raster::new_f32(2, 2, 1, data, Affine::IDENTITY).unwrap();
        let back = decode_raster(&encode_raster(&r)).unwrap();
        match (&back.samples, &r.samples) {
            (Samples::F32(a), Samples::F32(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn minimal_file_parses() {
        let r = Raster::new_u16(1, 1, 1, vec![7], Affine::IDENTITY).unwrap();
        let bytes = encode_raster(&r);
        assert_eq!(bytes.len(), 4 + 5 * 4 + 48 + 2);
        assert_eq!(decode_raster(&bytes).unwrap(), r);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let mut bytes = encode_raster(&sample());
        match decode_raster(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 72),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        match decode_raster(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }
}
