//! 1-D interpolation and bracketing root finding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// End conditions for [`CubicSpline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplineBoundary {
    /// Zero second derivative at both ends.
    Natural,
    /// Third derivative continuous across the second and penultimate knots.
    NotAKnot,
}

/// Interpolating cubic spline stored as per-interval polynomial coefficients.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    // y_i + b_i dx + c_i dx^2 + d_i dx^3 on [x_i, x_{i+1}]
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

fn check_knots(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("knot abscissae and ordinates differ in length"));
    }
    if x.len() < min {
        return Err(Error::Insufficient(format!("need at least {min} knots, got {}", x.len())));
    }
    if x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("knot abscissae must be strictly increasing"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spline knots".into()));
    }
    Ok(())
}

impl CubicSpline {
    pub fn new(x: &[f64], y: &[f64], boundary: SplineBoundary) -> Result<Self> {
        let min = match boundary {
            SplineBoundary::Natural => 3,
            SplineBoundary::NotAKnot => 4,
        };
        check_knots(x, y, min)?;
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let slope: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();

        // Solve for second derivatives m_i with a tridiagonal system.
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            lower[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            upper[i] = h[i];
            rhs[i] = 6.0 * (slope[i] - slope[i - 1]);
        }
        let m = match boundary {
            SplineBoundary::Natural => {
                diag[0] = 1.0;
                diag[n - 1] = 1.0;
                solve_tridiagonal(&lower, &diag, &upper, &rhs)
            }
            SplineBoundary::NotAKnot => {
                // m0 = ((h0+h1) m1 - h0 m2)/h1 substituted into row 1, and the
                // mirror image at the right end, leaves an (n-2)-square system.
                let mut l = lower[1..n - 1].to_vec();
                let mut dg = diag[1..n - 1].to_vec();
                let mut u = upper[1..n - 1].to_vec();
                let r = rhs[1..n - 1].to_vec();
                let k = dg.len();
                let (h0, h1) = (h[0], h[1]);
                dg[0] += h0 * (h0 + h1) / h1;
                u[0] -= h0 * h0 / h1;
                let (hl, hp) = (h[n - 2], h[n - 3]);
                dg[k - 1] += hl * (hl + hp) / hp;
                l[k - 1] -= hl * hl / hp;
                let inner = solve_tridiagonal(&l, &dg, &u, &r);
                let mut m = vec![0.0; n];
                m[1..n - 1].copy_from_slice(&inner);
                m[0] = ((h0 + h1) * m[1] - h0 * m[2]) / h1;
                m[n - 1] = ((hl + hp) * m[n - 2] - hl * m[n - 3]) / hp;
                m
            }
        };

        let mut a = Vec::with_capacity(n - 1);
        let mut b = Vec::with_capacity(n - 1);
        let mut c = Vec::with_capacity(n - 1);
        let mut d = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            a.push(y[i]);
            b.push(slope[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
            c.push(m[i] / 2.0);
            d.push((m[i + 1] - m[i]) / (6.0 * h[i]));
        }
        Ok(Self { x: x.to_vec(), a, b, c, d })
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }

    /// Evaluates the spline; outside the knot range the end polynomials are
    /// extrapolated.
    pub fn eval(&self, t: f64) -> f64 {
        let i = interval(&self.x, t);
        let dx = t - self.x[i];
        self.a[i] + dx * (self.b[i] + dx * (self.c[i] + dx * self.d[i]))
    }
}

/// Piecewise-linear interpolation, extrapolating the end segments.
#[derive(Debug, Clone)]
pub struct LinearInterp {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl LinearInterp {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        check_knots(x, y, 2)?;
        Ok(Self { x: x.to_vec(), y: y.to_vec() })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = interval(&self.x, t);
        let s = (t - self.x[i]) / (self.x[i + 1] - self.x[i]);
        self.y[i] + s * (self.y[i + 1] - self.y[i])
    }
}

fn interval(x: &[f64], t: f64) -> usize {
    let n = x.len();
    match x.iter().rposition(|&k| k <= t) {
        None => 0,
        Some(i) => i.min(n - 2),
    }
}

fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Tolerances for [`brentq`]; the defaults mirror common library settings.
#[derive(Debug, Clone, Copy)]
pub struct BrentOptions {
    pub xtol: f64,
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for BrentOptions {
    fn default() -> Self {
        Self { xtol: 2e-12, rtol: 4.0 * f64::EPSILON, max_iter: 100 }
    }
}

/// Brent's method on a sign-changing bracket `[xa, xb]`.
pub fn brentq<F: Fn(f64) -> f64>(f: F, xa: f64, xb: f64, opts: BrentOptions) -> Result<f64> {
    let mut xpre = xa;
    let mut xcur = xb;
    let mut fpre = f(xpre);
    let mut fcur = f(xcur);
    if !(fpre.is_finite() && fcur.is_finite()) {
        return Err(Error::NonFinite("bracket endpoints".into()));
    }
    if fpre == 0.0 {
        return Ok(xpre);
    }
    if fcur == 0.0 {
        return Ok(xcur);
    }
    if fpre.signum() == fcur.signum() {
        return Err(Error::param(format!("[{xa}, {xb}] does not bracket a root")));
    }
    let (mut xblk, mut fblk) = (0.0, 0.0);
    let (mut spre, mut scur) = (0.0f64, 0.0f64);
    for _ in 0..opts.max_iter {
        if fpre != 0.0 && fcur != 0.0 && fpre.signum() != fcur.signum() {
            xblk = xpre;
            fblk = fpre;
            spre = xcur - xpre;
            scur = spre;
        }
        if fblk.abs() < fcur.abs() {
            xpre = xcur;
            xcur = xblk;
            xblk = xpre;
            fpre = fcur;
            fcur = fblk;
            fblk = fpre;
        }
        let delta = (opts.xtol + opts.rtol * xcur.abs()) / 2.0;
        let sbis = (xblk - xcur) / 2.0;
        if fcur == 0.0 || sbis.abs() < delta {
            return Ok(xcur);
        }
        if spre.abs() > delta && fcur.abs() < fpre.abs() {
            let stry = if xpre == xblk {
                // secant
                -fcur * (xcur - xpre) / (fcur - fpre)
            } else {
                // inverse quadratic
                let dpre = (fpre - fcur) / (xpre - xcur);
                let dblk = (fblk - fcur) / (xblk - xcur);
                -fcur * (fblk * dblk - fpre * dpre) / (dblk * dpre * (fblk - fpre))
            };
            if 2.0 * stry.abs() < spre.abs().min(3.0 * sbis.abs() - delta) {
                spre = scur;
                scur = stry;
            } else {
                spre = sbis;
                scur = sbis;
            }
        } else {
            spre = sbis;
            scur = sbis;
        }
        xpre = xcur;
        fpre = fcur;
        if scur.abs() > delta {
            xcur += scur;
        } else {
            xcur += if sbis > 0.0 { delta } else { -delta };
        }
        fcur = f(xcur);
    }
    Ok(xcur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_cube_root() {
        let r = brentq(|x| x * x * x - 0.5, 0.0, 1.0, BrentOptions::default()).unwrap();
        assert!((r - libm::cbrt(0.5)).abs() < 1e-12);
    }

    #[test]
    fn brent_rejects_non_bracket() {
        assert!(brentq(|x| x * x + 1.0, -1.0, 1.0, BrentOptions::default()).is_err());
    }

    #[test]
    fn splines_reproduce_cubics() {
        // not-a-knot is exact for any cubic
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.1 * x * x * x;
        let xs = [0.0, 0.7, 1.5, 2.0, 3.1, 4.0];
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let s = CubicSpline::new(&xs, &ys, SplineBoundary::NotAKnot).unwrap();
        for t in [0.1, 0.9, 1.77, 2.5, 3.9] {
            assert!((s.eval(t) - f(t)).abs() < 1e-12, "t={t}");
        }
        // natural is exact for lines
        let ys: Vec<f64> = xs.iter().map(|&x| 3.0 * x - 1.0).collect();
        let s = CubicSpline::new(&xs, &ys, SplineBoundary::Natural).unwrap();
        assert!((s.eval(2.2) - 5.6).abs() < 1e-12);
    }

    #[test]
    fn splines_interpolate_knots() {
        let xs = [0.12, 0.24, 0.48, 0.96];
        let ys = [1.0, -2.0, 0.5, 3.0];
        for b in [SplineBoundary::Natural, SplineBoundary::NotAKnot] {
            let s = CubicSpline::new(&xs, &ys, b).unwrap();
            for (x, y) in xs.iter().zip(ys) {
                assert!((s.eval(*x) - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knot_validation() {
        assert!(CubicSpline::new(&[0.0, 1.0, 2.0], &[0.0; 3], SplineBoundary::NotAKnot).is_err());
        assert!(LinearInterp::new(&[1.0, 0.0], &[0.0, 1.0]).is_err());
        let li = LinearInterp::new(&[0.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!(li.eval(1.0), 0.5);
    }
}
