//! Multi-scale MAE against a persistence baseline, null resolution, seed
//! statistics and binary change confusion metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::interp::{brentq, BrentOptions, CubicSpline, LinearInterp, SplineBoundary};
use crate::raster::{aggregate, Grid, GridKind};
use crate::{Error, Result};

/// Aggregation cell sides, in pixels, used by default.
pub const DEFAULT_SCALES: [usize; 6] = [4, 8, 16, 32, 64, 128];

/// Persistence forecast: the past map, unchanged.
pub fn null_forecast(past: &Grid) -> Grid {
    past.clone()
}

/// Mean absolute error pooled over pixels valid in both grids.
pub fn mae(pred: &Grid, truth: &Grid) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if pred.is_valid(i) && truth.is_valid(i) {
            sum += (pred.values()[i] - truth.values()[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Insufficient("no pixel valid in both grids".into()));
    }
    Ok(sum / n as f64)
}

/// MAE as a function of aggregation resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeCurve {
    pub resolutions_km: Vec<f64>,
    pub values: Vec<f64>,
}

impl MaeCurve {
    pub fn new(resolutions_km: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if resolutions_km.len() != values.len() || values.is_empty() {
            return Err(Error::shape("curve needs matching, nonempty resolution/value lists"));
        }
        if resolutions_km.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("curve resolutions must be strictly increasing"));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("MAE values must be nonnegative"));
        }
        Ok(Self { resolutions_km, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn mae_curve(pred: &Grid, truth: &Grid, cells: &[usize]) -> Result<MaeCurve> {
    pred.expect_kind(GridKind::Continuous)?;
    truth.expect_kind(GridKind::Continuous)?;
    pred.expect_same_shape(truth)?;
    let mut res = Vec::with_capacity(cells.len());
    let mut vals = Vec::with_capacity(cells.len());
    for &s in cells {
        let p = aggregate(pred, s)?;
        let t = aggregate(truth, s)?;
        res.push(s as f64 * pred.pixel_size() / 1000.0);
        vals.push(mae(&p, &t)?);
    }
    MaeCurve::new(res, vals)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullResolution {
    /// The curves cross at `km`, where both have MAE `mae`.
    Resolved { km: f64, mae: f64 },
    /// The model already beats the baseline at the finest scale.
    BelowRange,
    /// The model never beats the baseline over the evaluated scales.
    AboveRange,
}

impl NullResolution {
    pub fn km(&self) -> Option<f64> {
        match self {
            NullResolution::Resolved { km, .. } => Some(*km),
            _ => None,
        }
    }
}

/// Abscissa used when interpolating MAE curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionDomain {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy)]
pub struct NullResolutionOptions {
    pub domain: ResolutionDomain,
    pub boundary: SplineBoundary,
}

impl Default for NullResolutionOptions {
    fn default() -> Self {
        Self { domain: ResolutionDomain::Linear, boundary: SplineBoundary::NotAKnot }
    }
}

/// Resolution at which the model MAE curve meets the null MAE curve.
///
/// The model curve is cubic-spline interpolated and the null curve linearly
/// interpolated; the root of their difference is located with Brent's
/// method on the finest knot interval where the difference changes sign.
pub fn null_resolution(
    model: &MaeCurve,
    null: &MaeCurve,
    opts: NullResolutionOptions,
) -> Result<NullResolution> {
    if model.resolutions_km.len() != null.resolutions_km.len()
        || model
            .resolutions_km
            .iter()
            .zip(&null.resolutions_km)
            .any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0))
    {
        return Err(Error::shape("model and null curves must share resolutions"));
    }
    if model.len() < 4 {
        return Err(Error::Insufficient(format!(
            "cubic interpolation needs 4 scales, got {}",
            model.len()
        )));
    }
    let xs: Vec<f64> = match opts.domain {
        ResolutionDomain::Linear => model.resolutions_km.clone(),
        ResolutionDomain::Log => model.resolutions_km.iter().map(|&r| libm::log(r)).collect(),
    };
    let to_km = |x: f64| match opts.domain {
        ResolutionDomain::Linear => x,
        ResolutionDomain::Log => libm::exp(x),
    };
    let diff: Vec<f64> = model.values.iter().zip(&null.values).map(|(m, n)| m - n).collect();
    if diff[0] < 0.0 {
        return Ok(NullResolution::BelowRange);
    }
    if diff[0] == 0.0 {
        return Ok(NullResolution::Resolved { km: model.resolutions_km[0], mae: model.values[0] });
    }
    let spline = CubicSpline::new(&xs, &model.values, opts.boundary)?;
    let base = LinearInterp::new(&xs, &null.values)?;
    for i in 0..diff.len() - 1 {
        if diff[i] > 0.0 && diff[i + 1] <= 0.0 {
            let root = brentq(
                |x| spline.eval(x) - base.eval(x),
                xs[i],
                xs[i + 1],
                BrentOptions::default(),
            )?;
            return Ok(NullResolution::Resolved { km: to_km(root), mae: spline.eval(root) });
        }
    }
    Ok(NullResolution::AboveRange)
}

/// Per-pixel mean and population standard deviation across seed forecasts.
///
/// A pixel is nodata in the outputs if it is nodata in any input.
pub fn seed_stats(preds: &[Grid]) -> Result<(Grid, Grid)> {
    let first = preds.first().ok_or_else(|| Error::Insufficient("no forecasts".into()))?;
    for p in preds {
        p.expect_kind(GridKind::Continuous)?;
        first.expect_same_shape(p)?;
    }
    let n = preds.len() as f64;
    let mut mean = first.clone();
    let mut std = first.clone();
    for i in 0..first.len() {
        if preds.iter().any(|p| !p.is_valid(i)) {
            mean.set_nodata(i);
            std.set_nodata(i);
            continue;
        }
        let m = preds.iter().map(|p| p.values()[i]).sum::<f64>() / n;
        let var = preds.iter().map(|p| (p.values()[i] - m) * (p.values()[i] - m)).sum::<f64>() / n;
        mean.set(i, m);
        std.set(i, libm::sqrt(var));
    }
    Ok((mean, std))
}

/// Binary change map: 1 where `after - before > 0`.
pub fn change_mask(before: &Grid, after: &Grid) -> Result<Grid> {
    before.expect_same_shape(after)?;
    let mut values = Vec::with_capacity(before.len());
    let mut valid = Vec::with_capacity(before.len());
    for i in 0..before.len() {
        let ok = before.is_valid(i) && after.is_valid(i);
        valid.push(ok);
        values.push(if !ok {
            255.0
        } else if after.values()[i] - before.values()[i] > 0.0 {
            1.0
        } else {
            0.0
        });
    }
    Grid::with_mask(
        before.width(),
        before.height(),
        before.pixel_size(),
        GridKind::Categorical,
        values,
        valid,
        255.0,
    )
}

/// 2×2 change/no-change confusion counts with derived percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// Percent, unrounded.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl ConfusionCounts {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else {
                degenerate = true;
                0.0
            }
        };
        let p = ratio(tp as f64, (tp + fp) as f64);
        let r = ratio(tp as f64, (tp + fn_) as f64);
        let f1 = ratio(2.0 * p * r, p + r);
        Self { tp, fp, fn_, tn, precision: 100.0 * p, recall: 100.0 * r, f1: 100.0 * f1, degenerate }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Rounds a percentage to the two decimals used in reports.
pub fn round2(x: f64) -> f64 {
    libm::round(x * 100.0) / 100.0
}

/// Confusion counts of two boolean (nonzero = change) grids over pixels
/// valid in both.
pub fn confusion(pred_change: &Grid, true_change: &Grid) -> Result<ConfusionCounts> {
    pred_change.expect_same_shape(true_change)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred_change.len() {
        if !(pred_change.is_valid(i) && true_change.is_valid(i)) {
            continue;
        }
        match (pred_change.values()[i] != 0.0, true_change.values()[i] != 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ConfusionCounts::from_counts(tp, fp, fn_, tn))
}

/// Everything produced by an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_curve: MaeCurve,
    pub null_curve: MaeCurve,
    pub null_resolution: NullResolution,
    pub seed_count: usize,
    /// Mean of the per-pixel seed standard deviation.
    pub mean_seed_std: Option<f64>,
    pub confusion: Option<ConfusionCounts>,
}

/// Inputs to [`evaluate`]; `forecasts` are per-seed predictions.
pub struct EvalInputs<'a> {
    pub forecasts: &'a [Grid],
    pub truth: &'a Grid,
    pub past: &'a Grid,
    pub cells: &'a [usize],
}

/// Scores the seed-mean forecast and the persistence baseline at every
/// scale and derives the null resolution and binary change confusion.
pub fn evaluate(inputs: EvalInputs<'_>, opts: NullResolutionOptions) -> Result<EvalReport> {
    let (mean, std) = seed_stats(inputs.forecasts)?;
    let null = null_forecast(inputs.past);
    let model_curve = mae_curve(&mean, inputs.truth, inputs.cells)?;
    let null_curve = mae_curve(&null, inputs.truth, inputs.cells)?;
    let null_resolution = if model_curve.len() >= 4 {
        null_resolution(&model_curve, &null_curve, opts)?
    } else if model_curve.values[0] < null_curve.values[0] {
        NullResolution::BelowRange
    } else {
        return Err(Error::Insufficient("fewer than 4 scales for null resolution".into()));
    };
    let pred_change = change_mask(inputs.past, &mean)?;
    let true_change = change_mask(inputs.past, inputs.truth)?;
    Ok(EvalReport {
        model_curve,
        null_curve,
        null_resolution,
        seed_count: inputs.forecasts.len(),
        mean_seed_std: std.valid_mean(),
        confusion: Some(confusion(&pred_change, &true_change)?),
    })
}
