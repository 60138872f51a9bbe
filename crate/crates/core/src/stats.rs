//! Small numerical helpers: standard-normal functions and weighted summaries.

use statrs::function::erf;

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF via erfc (accurate in both tails).
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, Newton-refined to ~1e-13.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    // Crude bisection start, then Newton on the CDF.
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..4 {
        let f = normal_cdf(x) - p;
        let d = normal_pdf(x);
        if d <= 0.0 {
            break;
        }
        x -= f / d;
    }
    x
}

/// The tau-expectile of the standard normal, solved from the expectile
/// identity `tau E[(X-e)+] = (1-tau) E[(e-X)+]` by bisection.
pub fn normal_expectile(tau: f64) -> f64 {
    assert!(tau > 0.0 && tau < 1.0);
    // E[(X-e)+] = phi(e) - e (1 - Phi(e)),  E[(e-X)+] = e Phi(e) + phi(e)
    let g = |e: f64| {
        let upper = normal_pdf(e) - e * (1.0 - normal_cdf(e));
        let lower = e * normal_cdf(e) + normal_pdf(e);
        tau * upper - (1.0 - tau) * lower
    };
    bisect(g, -10.0, 10.0, 1e-13)
}

/// Bisection for a decreasing-or-increasing continuous function with a sign
/// change on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let flo = f(lo);
    assert!(
        flo * f(hi) <= 0.0,
        "bisect: no sign change on [{lo}, {hi}]"
    );
    let increasing = flo < 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if (v < 0.0) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Median of a slice (averages the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Empirical p-quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty() && (0.0..=1.0).contains(&p));
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// Mean and standard deviation (denominator n-1) of a slice.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
