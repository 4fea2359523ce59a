//! IGRD: little-endian binary grids.
//!
//! Header (24 bytes): magic `IGRD`, version `u16`, kind `u8` (0 categorical
//! `u8` body, 1 continuous `f32` body), reserved `u8`, width `u32`, height
//! `u32`, pixel size `f32`, nodata `f32`. The row-major body follows.
//! Pixels equal to the nodata value are masked on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use impervia_core::raster::{Grid, GridKind};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IGRD";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

pub fn encode(grid: &Grid) -> Result<Vec<u8>> {
    let (w, h) = (grid.width(), grid.height());
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match grid.kind() {
        GridKind::Categorical => 0,
        GridKind::Continuous => 1,
    });
    out.push(0);
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&(grid.pixel_size() as f32).to_le_bytes());
    out.extend_from_slice(&(grid.nodata_value() as f32).to_le_bytes());
    let nodata = grid.nodata_value();
    for i in 0..grid.len() {
        let v = if grid.is_valid(i) { grid.values()[i] } else { nodata };
        match grid.kind() {
            GridKind::Categorical => {
                if !(0.0..=255.0).contains(&v) {
                    return Err(Error::Format(format!("categorical value {v} does not fit u8")));
                }
                out.push(v as u8);
            }
            GridKind::Continuous => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the IGRD header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported IGRD version {version}")));
    }
    let kind = match bytes[6] {
        0 => GridKind::Categorical,
        1 => GridKind::Continuous,
        k => return Err(Error::Schema(format!("unknown grid kind {k}"))),
    };
    let w = read_u32(bytes, 8) as usize;
    let h = read_u32(bytes, 12) as usize;
    let pixel = f64::from(read_f32(bytes, 16));
    let nodata = f64::from(read_f32(bytes, 20));
    let n = w.checked_mul(h).ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let width = if kind == GridKind::Categorical { 1 } else { 4 };
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * width {
        return Err(Error::Format(format!("body has {} bytes, header implies {}", body.len(), n * width)));
    }
    let values: Vec<f64> = match kind {
        GridKind::Categorical => body.iter().map(|&b| f64::from(b)).collect(),
        GridKind::Continuous => body.chunks_exact(4).map(|c| f64::from(read_f32(c, 0))).collect(),
    };
    let valid = values.iter().map(|&v| v != nodata && !(v.is_nan() && nodata.is_nan())).collect();
    Ok(Grid::with_mask(w, h, pixel, kind, values, valid, nodata)?)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(grid)?)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Format(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuous_body_round_trips() {
        let g = Grid::continuous(2, 2, vec![0.0, 50.0, 100.0, 25.0]).unwrap();
        let back = decode(&encode(&g).unwrap()).unwrap();
        assert_eq!(back.values(), &[0.0, 50.0, 100.0, 25.0]);
        assert_eq!(back.pixel_size(), 30.0);
    }

    #[test]
    fn nodata_is_masked() {
        let g = Grid::with_mask(2, 1, 30.0, GridKind::Categorical, vec![3.0, 0.0], vec![true, false], 255.0).unwrap();
        let back = decode(&encode(&g).unwrap()).unwrap();
        assert_eq!(back.mask(), &[true, false]);
        assert_eq!(back.class_at(0), Some(3));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = encode(&Grid::continuous(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Format(_))));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unknown_kind() {
        let mut b = encode(&Grid::continuous(1, 1, vec![1.0]).unwrap()).unwrap();
        b[6] = 7;
        assert!(matches!(decode(&b), Err(Error::Schema(_))));
    }
}
