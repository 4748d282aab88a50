//! Least-squares fits: exponential relaxation and straight lines.

use crate::error::{Error, Result};

/// `y(t) = y_inf + (y0 - y_inf) exp(-r t)` with `y0` pinned to the first sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExponentialFit {
    pub asymptote: f64,
    pub rate: f64,
    /// Asymptotic standard error of `rate`; infinite when the data carry no decay.
    pub rate_stderr: f64,
    pub rms_residual: f64,
}

impl ExponentialFit {
    pub fn eval(&self, y0: f64, t: f64) -> f64 {
        self.asymptote + (y0 - self.asymptote) * (-self.rate * t).exp()
    }
}

fn check_series(t: &[f64], y: &[f64], need: usize) -> Result<()> {
    if t.len() != y.len() {
        return Err(Error::Dimension {
            expected: t.len(),
            found: y.len(),
        });
    }
    if t.len() < need {
        return Err(Error::InsufficientPoints {
            need,
            found: t.len(),
        });
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit data"));
    }
    Ok(())
}

/// Best asymptote for a given rate and the residual sum of squares.
fn project(t: &[f64], y: &[f64], rate: f64, fixed: Option<f64>) -> (f64, f64) {
    let y0 = y[0];
    let t0 = t[0];
    let asym = fixed.unwrap_or_else(|| {
        let (mut num, mut den) = (0.0, 0.0);
        for (&ti, &yi) in t.iter().zip(y) {
            let g = 1.0 - (-rate * (ti - t0)).exp();
            num += g * (yi - y0 * (1.0 - g));
            den += g * g;
        }
        if den > 0.0 {
            num / den
        } else {
            y0
        }
    });
    let ssr = t
        .iter()
        .zip(y)
        .map(|(&ti, &yi)| {
            let e = (-rate * (ti - t0)).exp();
            let r = yi - (asym + (y0 - asym) * e);
            r * r
        })
        .sum();
    (asym, ssr)
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Variable-projection fit of an exponential relaxation. With `fixed_asymptote`
/// only the rate is free.
pub fn fit_exponential(
    t: &[f64],
    y: &[f64],
    fixed_asymptote: Option<f64>,
) -> Result<ExponentialFit> {
    let free = if fixed_asymptote.is_some() { 1 } else { 2 };
    check_series(t, y, free + 1)?;
    let span = t[t.len() - 1] - t[0];
    if !(span > 0.0) {
        return Err(Error::Fit("time axis must increase".into()));
    }
    let y0 = y[0];
    let scale = y.iter().fold(0.0f64, |m, v| m.max((v - y0).abs()));
    if scale < 1e-14 && fixed_asymptote.is_none_or(|a| (a - y0).abs() < 1e-14) {
        return Ok(ExponentialFit {
            asymptote: y0,
            rate: 0.0,
            rate_stderr: f64::INFINITY,
            rms_residual: 0.0,
        });
    }
    // Coarse scan in log-rate, then golden-section refinement.
    let lo = (1e-6 / span).ln();
    let hi = (1e4 / span).ln();
    let grid = 400;
    let cost = |u: f64| project(t, y, u.exp(), fixed_asymptote).1;
    let step = (hi - lo) / grid as f64;
    let best = (0..=grid)
        .map(|k| lo + step * k as f64)
        .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
        .unwrap();
    let u = golden_min(cost, best - step, best + step, 200);
    let rate = u.exp();
    if u <= lo + step || u >= hi - step {
        return Err(Error::Fit(format!(
            "rate {rate:.3e} at the edge of the search range"
        )));
    }
    let (asymptote, ssr) = project(t, y, rate, fixed_asymptote);

    // Gauss-Newton covariance at the optimum.
    let t0 = t[0];
    let (mut jrr, mut jra, mut jaa) = (0.0, 0.0, 0.0);
    for &ti in t {
        let e = (-rate * (ti - t0)).exp();
        let dr = -(y0 - asymptote) * (ti - t0) * e;
        let da = 1.0 - e;
        jrr += dr * dr;
        jra += dr * da;
        jaa += da * da;
    }
    let dof = (t.len() - free) as f64;
    let s2 = ssr / dof;
    let var_r = if free == 2 {
        let det = jrr * jaa - jra * jra;
        if det > 0.0 {
            s2 * jaa / det
        } else {
            f64::INFINITY
        }
    } else if jrr > 0.0 {
        s2 / jrr
    } else {
        f64::INFINITY
    };
    Ok(ExponentialFit {
        asymptote,
        rate,
        rate_stderr: var_r.sqrt(),
        rms_residual: (ssr / t.len() as f64).sqrt(),
    })
}

/// Ordinary least-squares line with standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
}

pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<LineFit> {
    check_series(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (slope_stderr, intercept_stderr) = if x.len() > 2 {
        let ssr: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        let s2 = ssr / (n - 2.0);
        ((s2 / sxx).sqrt(), (s2 * (1.0 / n + mx * mx / sxx)).sqrt())
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_stderr,
        intercept_stderr,
    })
}

/// Power law `y = a x^k` by regression of `ln y` on `ln x`; the slope is the exponent.
pub fn power_law_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Fit("power-law fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_regression(&lx, &ly)
}
