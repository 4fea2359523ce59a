//! Imperviousness likelihood estimation from LULC transitions.
//!
//! A pair of co-registered land-cover maps is cross-tabulated into a C×C
//! count matrix. Destination columns are then collapsed into two: a
//! fully-pervious column summing every non-developed destination, and an
//! impervious column where each developed destination contributes its count
//! scaled by the class weight. Row normalisation turns that into per-class
//! probabilities, and column 1 is looked up per pixel to form the likelihood
//! map.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::raster::{Grid, GridKind, LulcLegend};
use crate::{Error, Result};

/// Row-major C×C transition counts: `counts[from * C + to]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl CountMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.classes + to]
    }

    pub fn row(&self, from: usize) -> &[u64] {
        &self.counts[from * self.classes..(from + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    /// Adds another matrix in place; used to merge per-chunk counts.
    pub fn merge(&mut self, other: &CountMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::shape("count matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Cross-tabulates two categorical maps over pixels valid in both.
pub fn crosstab(lc_t: &Grid, lc_t1: &Grid, classes: usize) -> Result<CountMatrix> {
    lc_t.expect_kind(GridKind::Categorical)?;
    lc_t1.expect_kind(GridKind::Categorical)?;
    lc_t.expect_same_shape(lc_t1)?;
    let mut m = CountMatrix::zeros(classes);
    for i in 0..lc_t.len() {
        let (Some(a), Some(b)) = (lc_t.class_at(i), lc_t1.class_at(i)) else {
            continue;
        };
        for class in [a, b] {
            if class >= classes {
                return Err(Error::ClassOutOfRange { class, classes });
            }
        }
        m.counts[a * classes + b] += 1;
    }
    Ok(m)
}

/// Collapses destination columns into `[pervious, weighted impervious]`.
pub fn collapse(counts: &CountMatrix, legend: &LulcLegend) -> Result<Vec<[f64; 2]>> {
    let c = counts.classes();
    if legend.class_count() != c {
        return Err(Error::param(format!(
            "legend has {} classes, counts have {c}",
            legend.class_count()
        )));
    }
    let rows = (0..c)
        .map(|from| {
            let mut out = [0.0; 2];
            for (to, &n) in counts.row(from).iter().enumerate() {
                let n = n as f64;
                if legend.is_pervious(to) {
                    out[0] += n;
                } else if let Some(w) = legend.developed_weight(to) {
                    out[1] += w * n;
                }
            }
            out
        })
        .collect();
    Ok(rows)
}

/// Row-normalised collapsed counts. Rows without support become `[1, 0]`
/// and are returned in the absent set.
pub fn normalize(collapsed: &[[f64; 2]]) -> (Vec<[f64; 2]>, BTreeSet<usize>) {
    let mut absent = BTreeSet::new();
    let probs = collapsed
        .iter()
        .enumerate()
        .map(|(i, &[p, q])| {
            let s = p + q;
            if s > 0.0 {
                [p / s, q / s]
            } else {
                absent.insert(i);
                [1.0, 0.0]
            }
        })
        .collect();
    (probs, absent)
}

/// Algorithm state for one (t, t+1) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTables {
    pub counts: CountMatrix,
    pub collapsed: Vec<[f64; 2]>,
    pub probs: Vec<[f64; 2]>,
    pub absent_classes: BTreeSet<usize>,
}

impl TransitionTables {
    pub fn from_pair(lc_t: &Grid, lc_t1: &Grid, legend: &LulcLegend) -> Result<Self> {
        let counts = crosstab(lc_t, lc_t1, legend.class_count())?;
        let collapsed = collapse(&counts, legend)?;
        let (probs, absent_classes) = normalize(&collapsed);
        Ok(Self { counts, collapsed, probs, absent_classes })
    }

    /// Imperviousness transition likelihood of each class (column 1).
    pub fn impervious_column(&self) -> Vec<f64> {
        self.probs.iter().map(|r| r[1]).collect()
    }
}

/// Per-pixel lookup of `probs[class][1]`; values lie in [0, 1].
pub fn likelihood_map(lc: &Grid, probs: &[[f64; 2]]) -> Result<Grid> {
    lc.expect_kind(GridKind::Categorical)?;
    let mut values = Vec::with_capacity(lc.len());
    for i in 0..lc.len() {
        match lc.class_at(i) {
            Some(c) if c < probs.len() => values.push(probs[c][1]),
            Some(c) => return Err(Error::ClassOutOfRange { class: c, classes: probs.len() }),
            None => values.push(-1.0),
        }
    }
    Grid::with_mask(
        lc.width(),
        lc.height(),
        lc.pixel_size(),
        GridKind::Continuous,
        values,
        lc.mask().to_vec(),
        -1.0,
    )
}

/// Likelihood maps for a series of N aligned land-cover maps.
///
/// Maps 1..N-1 come from consecutive pairs. The N-th map reuses the
/// probabilities of the final pair but looks up classes on the final map.
pub fn likelihood_series(series: &[Grid], legend: &LulcLegend) -> Result<Vec<Grid>> {
    Ok(likelihood_series_with_tables(series, legend)?.0)
}

/// As [`likelihood_series`], also returning the per-pair tables.
pub fn likelihood_series_with_tables(
    series: &[Grid],
    legend: &LulcLegend,
) -> Result<(Vec<Grid>, Vec<TransitionTables>)> {
    if series.len() < 2 {
        return Err(Error::Insufficient(format!(
            "likelihood series needs at least 2 maps, got {}",
            series.len()
        )));
    }
    let tables = series
        .windows(2)
        .map(|w| TransitionTables::from_pair(&w[0], &w[1], legend))
        .collect::<Result<Vec<_>>>()?;
    let mut maps = series
        .iter()
        .zip(&tables)
        .map(|(lc, t)| likelihood_map(lc, &t.probs))
        .collect::<Result<Vec<_>>>()?;
    let last = tables.last().expect("at least one pair");
    maps.push(likelihood_map(series.last().expect("nonempty"), &last.probs)?);
    Ok((maps, tables))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn legend() -> LulcLegend {
        LulcLegend::nlcd16()
    }

    #[test]
    fn crosstab_constant_map_is_diagonal() {
        let g = Grid::categorical(2, 2, &[3; 4]).unwrap();
        let m = crosstab(&g, &g, 4).unwrap();
        assert_eq!(m.get(3, 3), 4);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn crosstab_two_pixels() {
        let a = Grid::categorical(2, 1, &[0, 1]).unwrap();
        let b = Grid::categorical(2, 1, &[1, 1]).unwrap();
        let m = crosstab(&a, &b, 2).unwrap();
        assert_eq!(m.as_slice(), &[0, 1, 0, 1]);
    }

    #[test]
    fn crosstab_errors() {
        let a = Grid::categorical(2, 1, &[0, 5]).unwrap();
        let b = Grid::categorical(2, 1, &[1, 1]).unwrap();
        assert_eq!(crosstab(&a, &b, 4), Err(Error::ClassOutOfRange { class: 5, classes: 4 }));
        let c = Grid::categorical(1, 1, &[0]).unwrap();
        assert!(matches!(crosstab(&a, &c, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn crosstab_skips_nodata() {
        let a = Grid::categorical(2, 1, &[0, 1]).unwrap();
        let mut b = Grid::categorical(2, 1, &[1, 1]).unwrap();
        b.set_nodata(0);
        assert_eq!(crosstab(&a, &b, 2).unwrap().total(), 1);
    }

    #[test]
    fn collapse_high_intensity_row() {
        let mut m = CountMatrix::zeros(16);
        m.counts[7 * 16 + 5] = 10;
        let c = collapse(&m, &legend()).unwrap();
        assert_eq!(c[7], [0.0, 10.0]);
    }

    #[test]
    fn collapse_pervious_row_and_mixed_row() {
        let mut m = CountMatrix::zeros(16);
        m.counts[11 * 16 + 7] = 3;
        m.counts[11 * 16 + 12] = 2;
        m.counts[12 * 16 + 2] = 4;
        m.counts[12 * 16 + 13] = 6;
        let c = collapse(&m, &legend()).unwrap();
        assert_eq!(c[11], [5.0, 0.0]);
        assert_eq!(c[12][0], 6.0);
        assert!((c[12][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn collapse_rejects_legend_mismatch() {
        assert!(collapse(&CountMatrix::zeros(8), &legend()).is_err());
    }

    #[test]
    fn normalize_cases() {
        let (p, absent) = normalize(&[[6.0, 0.8], [0.0, 0.0], [5.0, 5.0]]);
        assert!((p[0][0] - 6.0 / 6.8).abs() < 1e-15);
        assert!((p[0][1] - 0.8 / 6.8).abs() < 1e-15);
        assert!((p[0][0] - 0.882_352_941).abs() < 1e-9);
        assert_eq!(p[1], [1.0, 0.0]);
        assert_eq!(p[2], [0.5, 0.5]);
        assert_eq!(absent.into_iter().collect::<Vec<_>>(), [1]);
    }

    #[test]
    fn likelihood_map_lookup() {
        let water = Grid::categorical(2, 2, &[0; 4]).unwrap();
        let t = TransitionTables::from_pair(&water, &water, &legend()).unwrap();
        let lm = likelihood_map(&water, &t.probs).unwrap();
        assert!(lm.values().iter().all(|&v| v == 0.0));

        let one = Grid::categorical(1, 1, &[2]).unwrap();
        let mut probs = vec![[1.0, 0.0]; 3];
        probs[2] = [0.5, 0.5];
        assert_eq!(likelihood_map(&one, &probs).unwrap().values(), &[0.5]);
        assert!(likelihood_map(&one, &probs[..2]).is_err());
    }

    #[test]
    fn likelihood_map_propagates_nodata() {
        let mut lc = Grid::categorical(2, 1, &[0, 1]).unwrap();
        lc.set_nodata(1);
        let lm = likelihood_map(&lc, &[[0.5, 0.5], [0.0, 1.0]]).unwrap();
        assert_eq!(lm.get(0, 0), Some(0.5));
        assert_eq!(lm.get(1, 0), None);
    }

    #[test]
    fn series_needs_two_maps() {
        let g = Grid::categorical(1, 1, &[0]).unwrap();
        assert!(matches!(likelihood_series(&[g], &legend()), Err(Error::Insufficient(_))));
    }

    #[test]
    fn series_of_identical_maps() {
        let g = Grid::categorical(2, 2, &[0, 3, 7, 12]).unwrap();
        let maps = likelihood_series(&[g.clone(), g], &legend()).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0], maps[1]);
    }

    #[test]
    fn last_map_uses_final_pair_probs() {
        // Pasture (12) urbanises between lc2 and lc3; Barren (6) appears only in lc3.
        let lc1 = Grid::categorical(4, 1, &[12, 12, 7, 7]).unwrap();
        let lc2 = Grid::categorical(4, 1, &[12, 12, 7, 12]).unwrap();
        let lc3 = Grid::categorical(4, 1, &[5, 12, 6, 12]).unwrap();
        let maps = likelihood_series(&[lc1, lc2.clone(), lc3.clone()], &legend()).unwrap();
        let t23 = TransitionTables::from_pair(&lc2, &lc3, &legend()).unwrap();
        assert_eq!(maps[2], likelihood_map(&lc3, &t23.probs).unwrap());
        assert!(t23.absent_classes.contains(&6));
        // pasture: 1 to high intensity (w=1), 2 stay pasture -> 1/3
        assert!((maps[2].values()[1] - 1.0 / 3.0).abs() < 1e-15);
        // barren falls back to [1, 0]
        assert_eq!(maps[2].values()[2], 0.0);
    }
}
