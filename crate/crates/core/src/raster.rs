//! Raster data model: grids, legends, tiling, aggregation and change maps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Native NLCD pixel size.
pub const NLCD_PIXEL_SIZE_M: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Class indices, stored as `u8` on disk.
    Categorical,
    /// Imperviousness percent (or a probability), stored as `f32` on disk.
    Continuous,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Categorical => "categorical",
            GridKind::Continuous => "continuous",
        }
    }
}

/// A row-major 2-D raster with a per-pixel validity mask.
///
/// Values are held as `f64` regardless of kind; categorical grids carry
/// integral class indices. Nodata pixels keep whatever raw value they were
/// created with so that a load/save cycle is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    pixel_size: f64,
    kind: GridKind,
    nodata_value: f64,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl Grid {
    /// Builds a fully valid grid.
    pub fn new(
        width: usize,
        height: usize,
        pixel_size: f64,
        kind: GridKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::with_mask(width, height, pixel_size, kind, values, valid, default_nodata(kind))
    }

    pub fn continuous(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, NLCD_PIXEL_SIZE_M, GridKind::Continuous, values)
    }

    pub fn categorical(width: usize, height: usize, classes: &[u8]) -> Result<Self> {
        let values = classes.iter().map(|&c| f64::from(c)).collect();
        Self::new(width, height, NLCD_PIXEL_SIZE_M, GridKind::Categorical, values)
    }

    pub fn filled(width: usize, height: usize, kind: GridKind, value: f64) -> Self {
        Self {
            width,
            height,
            pixel_size: NLCD_PIXEL_SIZE_M,
            kind,
            nodata_value: default_nodata(kind),
            values: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Builds a grid with an explicit validity mask (`true` = valid).
    pub fn with_mask(
        width: usize,
        height: usize,
        pixel_size: f64,
        kind: GridKind,
        values: Vec<f64>,
        valid: Vec<bool>,
        nodata_value: f64,
    ) -> Result<Self> {
        if width.checked_mul(height) != Some(values.len()) {
            return Err(Error::shape(format!(
                "{width}x{height} grid given {} values",
                values.len()
            )));
        }
        if valid.len() != values.len() {
            return Err(Error::shape("mask length differs from value count"));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::param(format!("pixel size {pixel_size} must be positive")));
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if !ok {
                continue;
            }
            match kind {
                GridKind::Continuous if !v.is_finite() => {
                    return Err(Error::NonFinite(format!("pixel {i}")));
                }
                GridKind::Categorical if !(v >= 0.0 && v <= 255.0 && libm::trunc(v) == v) => {
                    return Err(Error::param(format!("pixel {i}: {v} is not a class index")));
                }
                _ => {}
            }
        }
        Ok(Self { width, height, pixel_size, kind, nodata_value, values, valid })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn nodata_value(&self) -> f64 {
        self.nodata_value
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    /// Class index at flat position `idx`, `None` for nodata.
    pub fn class_at(&self, idx: usize) -> Option<usize> {
        self.valid[idx].then(|| self.values[idx] as usize)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn with_pixel_size(mut self, pixel_size: f64) -> Self {
        self.pixel_size = pixel_size;
        self
    }

    /// Marks pixel `idx` as nodata, writing the nodata sentinel in place.
    pub fn set_nodata(&mut self, idx: usize) {
        self.valid[idx] = false;
        self.values[idx] = self.nodata_value;
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        self.values[idx] = value;
        self.valid[idx] = true;
    }

    /// Checks that every valid categorical value is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        self.expect_kind(GridKind::Categorical)?;
        for (i, &v) in self.values.iter().enumerate() {
            if self.valid[i] && v as usize >= classes {
                return Err(Error::ClassOutOfRange { class: v as usize, classes });
            }
        }
        Ok(())
    }

    pub(crate) fn expect_kind(&self, kind: GridKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Kind { expected: kind.name() })
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Copies out the `w`×`h` window whose top-left pixel is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Grid> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Dimension(format!(
                "window {w}x{h}@({x},{y}) exceeds {}x{} grid",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            values.extend_from_slice(&self.values[start..start + w]);
            valid.extend_from_slice(&self.valid[start..start + w]);
        }
        Ok(Grid {
            width: w,
            height: h,
            pixel_size: self.pixel_size,
            kind: self.kind,
            nodata_value: self.nodata_value,
            values,
            valid,
        })
    }

    /// Mean over valid pixels, `None` when every pixel is nodata.
    pub fn valid_mean(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (v, &ok) in self.values.iter().zip(&self.valid) {
            if ok {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

fn default_nodata(kind: GridKind) -> f64 {
    match kind {
        GridKind::Categorical => 255.0,
        GridKind::Continuous => -9999.0,
    }
}

/// A land-cover legend with the pervious/developed split used to collapse
/// cross-tabulations.
#[derive(Debug, Clone, PartialEq)]
pub struct LulcLegend {
    names: Vec<String>,
    developed_weight: Vec<Option<f64>>,
    pervious: Vec<bool>,
}

/// NLCD class codes in legend order.
pub const NLCD_CODES: [u8; 16] = [11, 12, 21, 22, 23, 24, 31, 41, 42, 43, 52, 71, 81, 82, 90, 95];

impl LulcLegend {
    pub fn new(names: Vec<String>, developed_weight: Vec<Option<f64>>) -> Result<Self> {
        if names.len() != developed_weight.len() {
            return Err(Error::param("legend names and weights differ in length"));
        }
        if names.is_empty() || names.len() > 256 {
            return Err(Error::param("legend must have 1..=256 classes"));
        }
        for w in developed_weight.iter().flatten() {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::param(format!("developed weight {w} outside (0,1]")));
            }
        }
        let pervious = developed_weight.iter().map(Option::is_none).collect();
        Ok(Self { names, developed_weight, pervious })
    }

    /// The 16-class NLCD legend. Developed classes are weighted by the upper
    /// bound of their imperviousness band; High Intensity is open ended and
    /// takes 1.0.
    pub fn nlcd16() -> Self {
        const CLASSES: [(&str, Option<f64>); 16] = [
            ("Open Water", None),
            ("Perennial Ice/Snow", None),
            ("Developed, Open Space", Some(0.20)),
            ("Developed, Low Intensity", Some(0.49)),
            ("Developed, Medium Intensity", Some(0.79)),
            ("Developed, High Intensity", Some(1.00)),
            ("Barren Land", None),
            ("Deciduous Forest", None),
            ("Evergreen Forest", None),
            ("Mixed Forest", None),
            ("Shrub/Scrub", None),
            ("Grassland/Herbaceous", None),
            ("Pasture/Hay", None),
            ("Cultivated Crops", None),
            ("Woody Wetlands", None),
            ("Emergent Herbaceous Wetlands", None),
        ];
        let names = CLASSES.iter().map(|(n, _)| String::from(*n)).collect();
        let weights = CLASSES.iter().map(|(_, w)| *w).collect();
        Self::new(names, weights).expect("static legend is valid")
    }

    /// Maps an NLCD product code (11, 21, ...) to its legend index.
    pub fn nlcd_index(code: u8) -> Option<u8> {
        NLCD_CODES.iter().position(|&c| c == code).map(|i| i as u8)
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn developed_weight(&self, class: usize) -> Option<f64> {
        self.developed_weight[class]
    }

    pub fn is_pervious(&self, class: usize) -> bool {
        self.pervious[class]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub index: usize,
    /// Column offset of the tile's top-left pixel.
    pub x: usize,
    /// Row offset of the tile's top-left pixel.
    pub y: usize,
    /// Fraction of nodata pixels, in parts per million.
    pub nodata_ppm: u32,
}

impl Tile {
    pub fn nodata_fraction(&self) -> f64 {
        f64::from(self.nodata_ppm) / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileStatus {
    Ok,
    /// The tile side exceeds at least one grid dimension; no tiles produced.
    SideExceedsGrid,
}

/// Non-overlapping, top-left anchored square tiles of a parent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSet {
    pub parent_width: usize,
    pub parent_height: usize,
    pub side: usize,
    pub columns: usize,
    pub rows: usize,
    pub tiles: Vec<Tile>,
    /// Pixels left uncovered on the right edge.
    pub margin_x: usize,
    /// Pixels left uncovered on the bottom edge.
    pub margin_y: usize,
    pub status: TileStatus,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn extract(&self, grid: &Grid, tile: &Tile) -> Result<Grid> {
        if grid.width != self.parent_width || grid.height != self.parent_height {
            return Err(Error::shape("grid does not match the tiled parent"));
        }
        grid.crop(tile.x, tile.y, self.side, self.side)
    }
}

/// Splits `grid` into `side`×`side` tiles anchored at the top-left corner.
pub fn tile(grid: &Grid, side: usize) -> Result<TileSet> {
    if side == 0 {
        return Err(Error::param("tile side must be at least 1"));
    }
    let columns = grid.width / side;
    let rows = grid.height / side;
    let status = if columns == 0 || rows == 0 { TileStatus::SideExceedsGrid } else { TileStatus::Ok };
    let (columns, rows) = if status == TileStatus::Ok { (columns, rows) } else { (0, 0) };
    let mut tiles = Vec::with_capacity(columns * rows);
    for r in 0..rows {
        for c in 0..columns {
            let (x, y) = (c * side, r * side);
            let mut missing = 0usize;
            for row in y..y + side {
                let start = row * grid.width + x;
                missing += grid.valid[start..start + side].iter().filter(|&&v| !v).count();
            }
            let ppm = (missing as u64 * 1_000_000 / (side * side) as u64) as u32;
            tiles.push(Tile { index: tiles.len(), x, y, nodata_ppm: ppm });
        }
    }
    Ok(TileSet {
        parent_width: grid.width,
        parent_height: grid.height,
        side,
        columns,
        rows,
        tiles,
        margin_x: grid.width - columns * side,
        margin_y: grid.height - rows * side,
        status,
    })
}

/// Block-mean aggregation of a continuous grid into `cell`×`cell` cells.
///
/// Nodata pixels are ignored; a block with no valid pixel becomes nodata.
pub fn aggregate(grid: &Grid, cell: usize) -> Result<Grid> {
    grid.expect_kind(GridKind::Continuous)?;
    if cell == 0 || grid.width % cell != 0 || grid.height % cell != 0 {
        return Err(Error::Dimension(format!(
            "cell {cell} does not divide {}x{}",
            grid.width, grid.height
        )));
    }
    let (ow, oh) = (grid.width / cell, grid.height / cell);
    let mut sums = vec![0.0f64; ow * oh];
    let mut counts = vec![0usize; ow * oh];
    for y in 0..grid.height {
        let orow = (y / cell) * ow;
        for x in 0..grid.width {
            let i = y * grid.width + x;
            if grid.valid[i] {
                sums[orow + x / cell] += grid.values[i];
                counts[orow + x / cell] += 1;
            }
        }
    }
    let mut values = Vec::with_capacity(ow * oh);
    let mut valid = Vec::with_capacity(ow * oh);
    for (s, n) in sums.into_iter().zip(counts) {
        if n > 0 {
            values.push(s / n as f64);
            valid.push(true);
        } else {
            values.push(grid.nodata_value);
            valid.push(false);
        }
    }
    Ok(Grid {
        width: ow,
        height: oh,
        pixel_size: grid.pixel_size * cell as f64,
        kind: GridKind::Continuous,
        nodata_value: grid.nodata_value,
        values,
        valid,
    })
}

/// Signed per-pixel difference `after - before`.
pub fn change_map(before: &Grid, after: &Grid) -> Result<Grid> {
    before.expect_kind(GridKind::Continuous)?;
    after.expect_kind(GridKind::Continuous)?;
    before.expect_same_shape(after)?;
    let mut out = before.clone();
    for i in 0..out.values.len() {
        if before.valid[i] && after.valid[i] {
            out.values[i] = after.values[i] - before.values[i];
        } else {
            out.set_nodata(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cont(w: usize, h: usize, v: &[f64]) -> Grid {
        Grid::continuous(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(Grid::continuous(2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn tile_counts_and_margins() {
        let g = Grid::filled(256, 256, GridKind::Continuous, 1.0);
        assert_eq!(tile(&g, 128).unwrap().len(), 4);

        let g = Grid::filled(300, 300, GridKind::Continuous, 1.0);
        let ts = tile(&g, 128).unwrap();
        assert_eq!(ts.len(), 4);
        assert_eq!((ts.margin_x, ts.margin_y), (44, 44));
        assert_eq!(ts.status, TileStatus::Ok);

        let g = Grid::filled(100, 100, GridKind::Continuous, 1.0);
        let ts = tile(&g, 128).unwrap();
        assert!(ts.is_empty());
        assert_eq!(ts.status, TileStatus::SideExceedsGrid);
    }

    #[test]
    fn tile_zero_side_is_an_error() {
        let g = Grid::filled(4, 4, GridKind::Continuous, 1.0);
        assert!(tile(&g, 0).is_err());
    }

    #[test]
    fn tile_reports_nodata_fraction() {
        let mut g = Grid::filled(4, 2, GridKind::Continuous, 1.0);
        g.set_nodata(0);
        let ts = tile(&g, 2).unwrap();
        assert_eq!(ts.tiles[0].nodata_ppm, 250_000);
        assert_eq!(ts.tiles[1].nodata_ppm, 0);
    }

    #[test]
    fn aggregate_identity_and_mean() {
        let g = cont(2, 2, &[0.0, 100.0, 50.0, 50.0]);
        assert_eq!(aggregate(&g, 1).unwrap(), g);
        let a = aggregate(&g, 2).unwrap();
        assert_eq!(a.values(), &[50.0]);
        assert_eq!(a.pixel_size(), 60.0);
    }

    #[test]
    fn aggregate_ignores_nodata() {
        let mut g = cont(2, 2, &[10.0, 20.0, 30.0, 90.0]);
        g.set_nodata(3);
        assert_eq!(aggregate(&g, 2).unwrap().values(), &[20.0]);
        for i in 0..4 {
            g.set_nodata(i);
        }
        let a = aggregate(&g, 2).unwrap();
        assert!(!a.is_valid(0));
    }

    #[test]
    fn aggregate_errors() {
        let g = cont(4, 4, &[0.0; 16]);
        assert!(matches!(aggregate(&g, 3), Err(Error::Dimension(_))));
        let c = Grid::categorical(2, 2, &[0, 1, 2, 3]).unwrap();
        assert!(matches!(aggregate(&c, 2), Err(Error::Kind { .. })));
    }

    #[test]
    fn change_map_cases() {
        let a = cont(1, 1, &[10.0]);
        let b = cont(1, 1, &[35.0]);
        assert_eq!(change_map(&a, &b).unwrap().values(), &[25.0]);
        assert!(change_map(&a, &a).unwrap().values().iter().all(|&v| v == 0.0));
        let c = cont(2, 1, &[0.0, 0.0]);
        assert!(change_map(&a, &c).is_err());
    }

    #[test]
    fn change_map_propagates_nodata() {
        let a = cont(2, 1, &[1.0, 2.0]);
        let mut b = cont(2, 1, &[3.0, 4.0]);
        b.set_nodata(1);
        let d = change_map(&a, &b).unwrap();
        assert_eq!(d.get(0, 0), Some(2.0));
        assert_eq!(d.get(1, 0), None);
    }

    #[test]
    fn nlcd_legend_weights() {
        let l = LulcLegend::nlcd16();
        assert_eq!(l.class_count(), 16);
        let developed: Vec<_> = (0..16).filter_map(|c| l.developed_weight(c)).collect();
        assert_eq!(developed, [0.20, 0.49, 0.79, 1.00]);
        assert!(!l.is_pervious(5));
        assert!(l.is_pervious(0));
        assert_eq!(LulcLegend::nlcd_index(24), Some(5));
        assert_eq!(LulcLegend::nlcd_index(13), None);
    }

    #[test]
    fn check_classes_flags_out_of_range() {
        let g = Grid::categorical(2, 1, &[0, 7]).unwrap();
        assert!(g.check_classes(8).is_ok());
        assert_eq!(g.check_classes(7), Err(Error::ClassOutOfRange { class: 7, classes: 7 }));
    }
}
