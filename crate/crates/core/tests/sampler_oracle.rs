use impervia_core::diffusion::{ddim_sample, ddpm_sample, GaussianOracle, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MEAN: f64 = 0.3;
const STD: f64 = 0.2;
const DRAWS: usize = 2000;

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn assert_matches(x: &[f64], what: &str) {
    let (m, s) = moments(x);
    assert!((m - MEAN).abs() / MEAN < 0.05, "{what}: mean {m}");
    assert!((s - STD).abs() / STD < 0.05, "{what}: std {s}");
}

#[test]
fn ddpm_recovers_gaussian_data() {
    let sched = NoiseSchedule::default();
    let oracle = GaussianOracle { mean: MEAN, std: STD, len: DRAWS, schedule: &sched };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = ddpm_sample(&oracle, &(), &sched, &mut rng).unwrap();
    assert_matches(&x, "ddpm");
}

#[test]
fn ddim_full_chain_with_unit_eta_matches_ddpm() {
    let sched = NoiseSchedule::default();
    let oracle = GaussianOracle { mean: MEAN, std: STD, len: DRAWS, schedule: &sched };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = ddim_sample(&oracle, &(), &sched, sched.steps(), 1.0, &mut rng).unwrap();
    assert_matches(&x, "ddim eta=1");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = ddpm_sample(&oracle, &(), &sched, &mut rng).unwrap();
    let (a, b) = (moments(&x), moments(&d));
    assert!((a.0 - b.0).abs() / b.0 < 0.05 && (a.1 - b.1).abs() / b.1 < 0.05);
}

/// With the exact predictor every DDIM step is affine in `x`, so the output
/// law is Gaussian with moments given by composing the affine maps.
fn ddim_affine_moments(sched: &NoiseSchedule, steps: usize) -> (f64, f64) {
    let total = sched.steps();
    let taus: Vec<usize> = (0..steps).rev().map(|i| 1 + i * (total - 1) / (steps - 1)).collect();
    let ab = |t: usize| if t == 0 { 1.0 } else { sched.alpha_bar(t) };
    let (mut m, mut v) = (0.0, 1.0);
    for (i, &t) in taus.iter().enumerate() {
        let p = taus.get(i + 1).copied().unwrap_or(0);
        let (a, ap) = (ab(t), ab(p));
        let k = (1.0 - a).sqrt() / (a * STD * STD + 1.0 - a);
        let slope = ap.sqrt() * (1.0 - (1.0 - a).sqrt() * k) / a.sqrt() + (1.0 - ap).sqrt() * k;
        let shift = ap.sqrt() * (1.0 - a).sqrt() * k * MEAN + -(1.0 - ap).sqrt() * k * a.sqrt() * MEAN;
        m = slope * m + shift;
        v *= slope * slope;
    }
    (m, v.sqrt())
}

#[test]
fn deterministic_ddim_follows_affine_oracle() {
    let sched = NoiseSchedule::default();
    let oracle = GaussianOracle { mean: MEAN, std: STD, len: DRAWS, schedule: &sched };
    for steps in [10, 50, 500] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = ddim_sample(&oracle, &(), &sched, steps, 0.0, &mut rng).unwrap();
        let (m, s) = moments(&x);
        let (om, os) = ddim_affine_moments(&sched, steps);
        assert!((m - om).abs() / om < 0.05, "{steps} steps: mean {m} vs {om}");
        assert!((s - os).abs() / os < 0.05, "{steps} steps: std {s} vs {os}");
    }
    // the long chain approaches the data law itself
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    assert_matches(&ddim_sample(&oracle, &(), &sched, 500, 0.0, &mut rng).unwrap(), "ddim 500");
}

#[test]
fn eta_zero_is_reproducible() {
    let sched = NoiseSchedule::default();
    let oracle = GaussianOracle { mean: MEAN, std: STD, len: 64, schedule: &sched };
    let run = || ddim_sample(&oracle, &(), &sched, 100, 0.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn samplers_stay_finite() {
    let sched = NoiseSchedule::default();
    let oracle = GaussianOracle { mean: -0.4, std: 0.5, len: 16, schedule: &sched };
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ddim_sample(&oracle, &(), &sched, 20, (seed % 3) as f64 / 2.0, &mut rng).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ddpm_sample(&oracle, &(), &sched, &mut rng).unwrap().iter().all(|v| v.is_finite()));
}
