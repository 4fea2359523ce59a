//! Raw raster ingest: ESRI ASCII grids, plus a GeoTIFF placeholder.

use std::fs;
use std::path::Path;

use impervia_core::raster::{Grid, GridKind, LulcLegend};

use crate::{Error, Result};

/// How raw cell values map onto grid values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawKind {
    /// NLCD land-cover codes (11, 21, ... 95), remapped to 16-class legend
    /// indices. Codes outside the legend become nodata.
    NlcdLandCover,
    /// Imperviousness percent in `[0, 100]`.
    Imperviousness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsciiHeader {
    pub ncols: usize,
    pub nrows: usize,
    pub cellsize: f64,
    pub nodata: Option<f64>,
}

fn parse_header(text: &str) -> Result<(AsciiHeader, usize)> {
    let (mut ncols, mut nrows, mut cellsize, mut nodata) = (None, None, None, None);
    let mut consumed = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else {
            consumed += 1;
            continue;
        };
        let key = key.to_ascii_lowercase();
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
            break;
        }
        let value = parts.next().ok_or_else(|| Error::Format(format!("header key {key} has no value")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("header {key}: bad number {v}")));
        match key.as_str() {
            "ncols" => ncols = Some(num(value)? as usize),
            "nrows" => nrows = Some(num(value)? as usize),
            "cellsize" => cellsize = Some(num(value)?),
            "nodata_value" => nodata = Some(num(value)?),
            "xllcorner" | "yllcorner" | "xllcenter" | "yllcenter" => {}
            _ => return Err(Error::Format(format!("unknown header key {key}"))),
        }
        consumed += 1;
    }
    let missing = |k: &str| Error::Format(format!("header lacks {k}"));
    let header = AsciiHeader {
        ncols: ncols.ok_or_else(|| missing("ncols"))?,
        nrows: nrows.ok_or_else(|| missing("nrows"))?,
        cellsize: cellsize.ok_or_else(|| missing("cellsize"))?,
        nodata,
    };
    Ok((header, consumed))
}

pub fn parse_ascii(text: &str, kind: RawKind) -> Result<Grid> {
    let (h, skip) = parse_header(text)?;
    let cells: Vec<f64> = text
        .lines()
        .skip(skip)
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad cell value {t}"))))
        .collect::<Result<_>>()?;
    if cells.len() != h.ncols * h.nrows {
        return Err(Error::Format(format!("{} cells for a {}x{} grid", cells.len(), h.ncols, h.nrows)));
    }
    let is_nodata = |v: f64| h.nodata == Some(v);
    let (values, valid): (Vec<f64>, Vec<bool>) = match kind {
        RawKind::NlcdLandCover => cells
            .iter()
            .map(|&v| {
                let idx = (!is_nodata(v) && v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                    .then(|| LulcLegend::nlcd_index(v as u8))
                    .flatten();
                match idx {
                    Some(i) => (f64::from(i), true),
                    None => (255.0, false),
                }
            })
            .unzip(),
        RawKind::Imperviousness => {
            let mut out = (Vec::with_capacity(cells.len()), Vec::with_capacity(cells.len()));
            for &v in &cells {
                if is_nodata(v) {
                    out.0.push(-1.0);
                    out.1.push(false);
                } else if (0.0..=100.0).contains(&v) {
                    out.0.push(v);
                    out.1.push(true);
                } else {
                    return Err(Error::Schema(format!("imperviousness {v} outside [0, 100]")));
                }
            }
            out
        }
    };
    let (grid_kind, nodata) = match kind {
        RawKind::NlcdLandCover => (GridKind::Categorical, 255.0),
        RawKind::Imperviousness => (GridKind::Continuous, -1.0),
    };
    Ok(Grid::with_mask(h.ncols, h.nrows, h.cellsize, grid_kind, values, valid, nodata)?)
}

pub fn read_ascii(path: impl AsRef<Path>, kind: RawKind) -> Result<Grid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ascii(&text, kind).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// GeoTIFF input is not decoded here.
///
/// Convert with GDAL first, e.g.
/// `gdal_translate -of AAIGrid nlcd_2019.tif nlcd_2019.asc`, after
/// reprojecting and clipping all years onto one 30 m grid. The ASCII file
/// then goes through [`read_ascii`].
pub fn read_geotiff(path: impl AsRef<Path>, _kind: RawKind) -> Result<Grid> {
    Err(Error::Unsupported(format!(
        "{}: GeoTIFF decoding is not built in; convert to ESRI ASCII with gdal_translate -of AAIGrid",
        path.as_ref().display()
    )))
}

/// Reads `.asc` as ESRI ASCII, `.igrd` as IGRD, `.tif`/`.tiff` via the
/// GeoTIFF placeholder.
pub fn read_raw(path: impl AsRef<Path>, kind: RawKind) -> Result<Grid> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let grid = match ext.as_str() {
        "asc" => read_ascii(path, kind)?,
        "tif" | "tiff" => read_geotiff(path, kind)?,
        "igrd" => crate::igrd::load_grid(path)?,
        _ => return Err(Error::Unsupported(format!("{}: unknown raster extension", path.display()))),
    };
    let want = match kind {
        RawKind::NlcdLandCover => GridKind::Categorical,
        RawKind::Imperviousness => GridKind::Continuous,
    };
    if grid.kind() != want {
        return Err(Error::Schema(format!("{} holds a {} grid", path.display(), grid.kind().name())));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LC: &str = "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 30\nNODATA_value 0\n11 21 95\n0 24 127\n";

    #[test]
    fn remaps_nlcd_codes() {
        let g = parse_ascii(LC, RawKind::NlcdLandCover).unwrap();
        assert_eq!((g.width(), g.height()), (3, 2));
        assert_eq!(g.class_at(0), Some(0));
        assert_eq!(g.class_at(1), Some(2));
        assert_eq!(g.class_at(2), Some(15));
        assert_eq!(g.class_at(3), None);
        assert_eq!(g.class_at(4), Some(5));
        assert_eq!(g.class_at(5), None);
    }

    #[test]
    fn imperviousness_masks_nodata_and_rejects_out_of_range() {
        let text = "ncols 2\nnrows 1\ncellsize 30\nNODATA_value 127\n40 127\n";
        let g = parse_ascii(text, RawKind::Imperviousness).unwrap();
        assert_eq!(g.mask(), &[true, false]);
        assert!(parse_ascii("ncols 1\nnrows 1\ncellsize 30\n140\n", RawKind::Imperviousness).is_err());
    }

    #[test]
    fn cell_count_must_match_header() {
        assert!(parse_ascii("ncols 2\nnrows 2\ncellsize 30\n1 2 3\n", RawKind::Imperviousness).is_err());
    }
}
