//! Linear noise schedule, forward noising, the noise-prediction loss and
//! ancestral / implicit samplers.

mod train;

pub use train::{
    AdamState, GradientExecutor, SequentialExecutor, TrainConfig, TrainOutcome, Trainer, TrainingExample,
    TrainingSet,
};

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Percent imperviousness `[0, 100]` to `[-1, 1]`.
pub fn normalize_percent(p: f64) -> f64 {
    p / 50.0 - 1.0
}

/// Inverse of [`normalize_percent`], clamped to `[0, 100]`.
pub fn denormalize_percent(x: f64) -> f64 {
    ((x + 1.0) * 50.0).clamp(0.0, 100.0)
}

/// Precomputed `beta_t`, `alpha_t`, `alpha_bar_t` for `t = 1..=T`, stored at
/// index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

/// Linear schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!("beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Mean squared difference.
pub fn denoise_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::shape(format!("loss over {} vs {} values", predicted.len(), target.len())));
    }
    let s: f64 = predicted.iter().zip(target).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(s / predicted.len() as f64)
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    type Cond: ?Sized;

    /// Number of values in one patch for this conditioning.
    fn patch_len(&self, cond: &Self::Cond) -> usize;

    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &Self::Cond) -> Result<Vec<f64>>;
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` using the posterior mean and
/// variance; the result is clamped to `[-1, 1]` only at the end.
pub fn ddpm_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = model.patch_len(cond);
    let mut x = standard_normal(rng, n);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(&x, t, cond)?;
        if eps.len() != n {
            return Err(Error::shape("predictor returned a patch of the wrong size"));
        }
        let coef = sched.beta(t) / libm::sqrt(1.0 - sched.alpha_bar(t));
        let inv = 1.0 / libm::sqrt(sched.alpha(t));
        for (v, e) in x.iter_mut().zip(&eps) {
            *v = inv * (*v - coef * e);
        }
        if t > 1 {
            let sd = libm::sqrt(sched.posterior_variance(t));
            for v in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sd * z;
            }
        }
    }
    clamp_unit(&mut x);
    Ok(x)
}

/// Evenly spaced descending timesteps `tau_i = 1 + floor(i (T - 1) / (steps - 1))`.
/// A single step jumps straight from `T`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::param(format!("DDIM steps {steps} must lie in 1..={total}")));
    }
    if steps == 1 {
        return Ok([total].to_vec());
    }
    Ok((0..steps).rev().map(|i| 1 + i * (total - 1) / (steps - 1)).collect())
}

/// DDIM sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimOptions {
    pub steps: usize,
    pub eta: f64,
    /// Clamp every intermediate `x0` estimate to `[-1, 1]` before stepping.
    pub clip_x0: bool,
}

impl Default for DdimOptions {
    fn default() -> Self {
        Self { steps: 500, eta: 0.0, clip_x0: true }
    }
}

/// DDIM over an evenly spaced subsequence without intermediate clipping;
/// `eta = 0` is deterministic given `x_T`, `eta = 1` with `steps = T` is
/// ancestral sampling.
pub fn ddim_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    ddim_sample_with(model, cond, sched, DdimOptions { steps, eta, clip_x0: false }, rng)
}

pub fn ddim_sample_with<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &M::Cond,
    sched: &NoiseSchedule,
    opts: DdimOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eta = opts.eta;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta {eta} outside [0, 1]")));
    }
    let taus = ddim_timesteps(sched.steps(), opts.steps)?;
    let n = model.patch_len(cond);
    let mut x = standard_normal(rng, n);
    for (i, &t) in taus.iter().enumerate() {
        let prev = taus.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict_noise(&x, t, cond)?;
        if eps.len() != n {
            return Err(Error::shape("predictor returned a patch of the wrong size"));
        }
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let sigma = eta * libm::sqrt((1.0 - ab_prev) / (1.0 - ab)) * libm::sqrt(1.0 - ab / ab_prev);
        let dir = libm::sqrt((1.0 - ab_prev - sigma * sigma).max(0.0));
        let (sa, sb, sp) = (libm::sqrt(ab), libm::sqrt(1.0 - ab), libm::sqrt(ab_prev));
        for (v, e) in x.iter_mut().zip(&eps) {
            let mut x0 = (*v - sb * e) / sa;
            let mut e = *e;
            if opts.clip_x0 {
                x0 = x0.clamp(-1.0, 1.0);
                // keep the noise direction consistent with the clipped estimate
                e = (*v - sa * x0) / sb;
            }
            *v = sp * x0 + dir * e;
        }
        if sigma > 0.0 {
            for v in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
    }
    clamp_unit(&mut x);
    Ok(x)
}

/// Exact noise predictor for data drawn i.i.d. per pixel from
/// `N(mean, std^2)`: `E[eps | x_t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOracle<'s> {
    pub mean: f64,
    pub std: f64,
    pub len: usize,
    pub schedule: &'s NoiseSchedule,
}

impl NoisePredictor for GaussianOracle<'_> {
    type Cond = ();

    fn patch_len(&self, _: &()) -> usize {
        self.len
    }

    fn predict_noise(&self, x_t: &[f64], t: usize, _: &()) -> Result<Vec<f64>> {
        let ab = self.schedule.alpha_bar(t);
        let var = ab * self.std * self.std + 1.0 - ab;
        let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        Ok(x_t.iter().map(|x| sb * (x - sa * self.mean) / var).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedules() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        let s = make_schedule(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::default();
        let x0 = [0.5, -0.25];
        let out = q_sample(&x0, 10, &[0.0, 0.0], &s).unwrap();
        let a = libm::sqrt(s.alpha_bar(10));
        assert_eq!(out, vec![a * 0.5, -a * 0.25]);
        assert!(q_sample(&x0, 0, &[0.0, 0.0], &s).is_err());
        assert!(q_sample(&x0, 1001, &[0.0, 0.0], &s).is_err());
        assert!(q_sample(&x0, 1, &[0.0], &s).is_err());
        let tiny = make_schedule(5, 1e-15, 1e-15).unwrap();
        let out = q_sample(&x0, 5, &[1.0, -1.0], &tiny).unwrap();
        assert!(out.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn loss_cases() {
        assert_eq!(denoise_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(denoise_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(denoise_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normalization_roundtrip() {
        assert_eq!(normalize_percent(0.0), -1.0);
        assert_eq!(normalize_percent(100.0), 1.0);
        assert_eq!(denormalize_percent(normalize_percent(37.5)), 37.5);
        assert_eq!(denormalize_percent(1.3), 100.0);
    }

    #[test]
    fn ddim_steps() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(10, 4).unwrap(), vec![10, 7, 4, 1]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert!(ddim_timesteps(5, 6).is_err());
    }

    #[test]
    fn single_step_chains_are_finite() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        let o = GaussianOracle { mean: 0.2, std: 0.1, len: 16, schedule: &s };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(ddpm_sample(&o, &(), &s, &mut rng).unwrap().iter().all(|v| v.is_finite()));
        let d = NoiseSchedule::default();
        let o = GaussianOracle { mean: 0.2, std: 0.1, len: 16, schedule: &d };
        assert!(ddim_sample(&o, &(), &d, 1, 0.0, &mut rng).unwrap().iter().all(|v| v.is_finite()));
    }
}
