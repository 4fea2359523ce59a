//! Seeded synthetic rasters: smooth fields, likelihood blobs, the toy
//! forecasting task and small multi-year land-cover series.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::ConditioningStack;
use crate::diffusion::{normalize_percent, TrainingExample};
use crate::raster::{Grid, LulcLegend};
use crate::Result;

/// Sum of `bumps` Gaussian bumps with amplitudes in `[0, amplitude]`,
/// clamped to `[0, 100]`.
pub fn smooth_field<R: Rng + ?Sized>(rng: &mut R, side: usize, bumps: usize, amplitude: f64, radius: f64) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for _ in 0..bumps {
        let cx = rng.random_range(0.0..side as f64);
        let cy = rng.random_range(0.0..side as f64);
        let a = rng.random_range(0.0..amplitude);
        let r = radius * rng.random_range(0.5..1.5);
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d2 = dx * dx + dy * dy;
                out[y * side + x] += a * libm::exp(-d2 / (2.0 * r * r));
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 100.0));
    out
}

/// Likelihood map in `[0, 1]`: a few soft discs.
pub fn blob_likelihood<R: Rng + ?Sized>(rng: &mut R, side: usize, blobs: usize, radius: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; side * side];
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..side as f64);
        let cy = rng.random_range(0.0..side as f64);
        let r = radius * rng.random_range(0.6..1.4);
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d = libm::sqrt(dx * dx + dy * dy);
                let v = 1.0 / (1.0 + libm::exp((d - r) / 1.5));
                out[y * side + x] = out[y * side + x].max(v);
            }
        }
    }
    out
}

/// One instance of the toy task in percent units.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    /// Conditioning imperviousness, oldest first.
    pub history: Vec<Vec<f64>>,
    pub likelihood: Vec<f64>,
    /// `clamp(past + gain * likelihood, 0, 100)` with `past` the last history map.
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTask {
    pub side: usize,
    pub n_cond: usize,
    pub gain: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self { side: 32, n_cond: 3, gain: 5.0 }
    }
}

impl ToyTask {
    pub fn instance(&self, seed: u64) -> ToyInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.side;
        let past = smooth_field(&mut rng, s, 4, 60.0, s as f64 / 5.0);
        let likelihood = blob_likelihood(&mut rng, s, 5, s as f64 / 5.0);
        // earlier maps grew into `past` at a slower rate
        let history = (0..self.n_cond)
            .map(|k| {
                let back = (self.n_cond - 1 - k) as f64;
                past.iter()
                    .zip(&likelihood)
                    .map(|(p, l)| (p - back * 0.5 * self.gain * l).clamp(0.0, 100.0))
                    .collect()
            })
            .collect();
        let truth = past.iter().zip(&likelihood).map(|(p, l)| (p + self.gain * l).clamp(0.0, 100.0)).collect();
        ToyInstance { history, likelihood, truth }
    }

    pub fn stack(&self, inst: &ToyInstance) -> Result<ConditioningStack> {
        ConditioningStack::new(
            self.side,
            Vec::new(),
            inst.history.iter().map(|m| m.iter().map(|&p| normalize_percent(p)).collect()).collect(),
            vec![inst.likelihood.clone(); self.n_cond],
        )
    }

    pub fn example(&self, seed: u64) -> Result<TrainingExample> {
        let inst = self.instance(seed);
        Ok(TrainingExample {
            cond: self.stack(&inst)?,
            target: inst.truth.iter().map(|&p| normalize_percent(p)).collect(),
        })
    }
}

/// Uniform random categorical grid.
pub fn random_categorical<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, classes: u8) -> Result<Grid> {
    let cells: Vec<u8> = (0..width * height).map(|_| rng.random_range(0..classes)).collect();
    Grid::categorical(width, height, &cells)
}

/// Multi-year land cover (16-class NLCD legend indices) and matching
/// imperviousness for a synthetic landscape where development spreads
/// outward from a few seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLandscape {
    pub years: Vec<u16>,
    pub lulc: Vec<Grid>,
    pub imperv: Vec<Grid>,
}

pub fn landscape(side: usize, years: &[u16], seed: u64) -> Result<SyntheticLandscape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let legend = LulcLegend::nlcd16();
    // base cover from a smooth field: water, forest, shrub, grass, crops, wetland
    let field = smooth_field(&mut rng, side, 8, 100.0, side as f64 / 6.0);
    let base: Vec<u8> = field
        .iter()
        .map(|&v| match v {
            v if v < 5.0 => 12,
            v if v < 15.0 => 13,
            v if v < 30.0 => 7,
            v if v < 45.0 => 10,
            v if v < 60.0 => 11,
            v if v < 90.0 => 8,
            _ => 0,
        })
        .collect();
    let urban = smooth_field(&mut rng, side, 3, 100.0, side as f64 / 8.0);
    let mut lulc = Vec::new();
    let mut imperv = Vec::new();
    let n = years.len().max(1) as f64;
    for (k, _) in years.iter().enumerate() {
        // development front advances with time
        let level = 70.0 - 40.0 * k as f64 / n;
        let cells: Vec<u8> = base
            .iter()
            .zip(&urban)
            .map(|(&b, &u)| {
                if b == 0 || u < level {
                    b
                } else if u > level + 25.0 {
                    5
                } else if u > level + 15.0 {
                    4
                } else if u > level + 7.0 {
                    3
                } else {
                    2
                }
            })
            .collect();
        let imp: Vec<f64> = cells
            .iter()
            .map(|&c| {
                let w = legend.developed_weight(usize::from(c)).unwrap_or(0.0);
                if w > 0.0 {
                    (100.0 * w + rng.random_range(-5.0..5.0)).clamp(0.0, 100.0)
                } else {
                    0.0
                }
            })
            .collect();
        lulc.push(Grid::categorical(side, side, &cells)?);
        imperv.push(Grid::continuous(side, side, imp)?);
    }
    Ok(SyntheticLandscape { years: years.to_vec(), lulc, imperv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_truth_rule() {
        let task = ToyTask::default();
        let inst = task.instance(4);
        let past = inst.history.last().unwrap();
        for i in 0..past.len() {
            let want = (past[i] + 5.0 * inst.likelihood[i]).clamp(0.0, 100.0);
            assert_eq!(inst.truth[i], want);
        }
        assert_eq!(task.instance(4), inst);
    }

    #[test]
    fn landscape_is_monotone_in_development() {
        let l = landscape(32, &[2001, 2006, 2011], 1).unwrap();
        let dev = |g: &Grid| g.values().iter().filter(|&&v| (2.0..=5.0).contains(&v)).count();
        assert!(dev(&l.lulc[0]) <= dev(&l.lulc[2]));
        assert_eq!(l.imperv.len(), 3);
    }
}
