//! Gaussian kernels, weighted kernel density estimates, and the smoothing
//! operators behind the smoothed log-likelihood.
//!
//! The linear smoother `S` convolves a function with the rescaled kernel
//! `K_h`; the nonlinear smoother `N f = exp(S ln f)` is what enters the
//! smoothed likelihood. `S ln f` is evaluated by trapezoidal quadrature over
//! a fixed grid. The quadrature is applied directly at every evaluation point
//! (no interpolation between grid nodes), which keeps the minorization
//! identities of the fitting loop exact up to floating-point roundoff.

use serde::{Deserialize, Serialize};

use crate::data::XValue;
use crate::error::{Error, Result};
use crate::stats::{self, normal_cdf, normal_pdf};

/// Number of quadrature nodes per density grid.
pub const GRID_POINTS: usize = 512;

/// Grid margin beyond the data range, in units of the bandwidth. Eight
/// bandwidths leave less than 1e-15 of kernel mass outside the grid, so the
/// quadrature cannot perturb the monotonicity of the fitting loop. (The
/// contract only requires the grid to cover three bandwidths.)
pub const GRID_MARGIN_BANDWIDTHS: f64 = 8.0;

/// Floor applied to log densities before exponentiation.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

/// Bandwidth selection rule. The kernel itself is always Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `h = n^exponent`; the default exponent is -1/5.
    FixedPower { exponent: f64 },
    /// A user-supplied bandwidth.
    Explicit { h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: BandwidthRule,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { bandwidth: BandwidthRule::FixedPower { exponent: -0.2 } }
    }
}

impl KernelConfig {
    pub fn explicit(h: f64) -> Self {
        KernelConfig { bandwidth: BandwidthRule::Explicit { h } }
    }
}

/// Resolves the bandwidth for a sample of size `n`.
pub fn select_bandwidth(n: usize, config: &KernelConfig) -> Result<f64> {
    let h = match config.bandwidth {
        BandwidthRule::FixedPower { exponent } => {
            if n < 2 {
                return Err(Error::invalid("bandwidth rule n^e needs n >= 2"));
            }
            (n as f64).powf(exponent)
        }
        BandwidthRule::Explicit { h } => h,
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    Ok(h)
}

/// `K_h(a) = phi(a/h)/h` for the Gaussian kernel.
#[inline]
pub fn scaled_kernel(a: f64, h: f64) -> f64 {
    normal_pdf(a / h) / h
}

/// Uniform quadrature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl Grid {
    /// Grid of `len` points covering `[lo - margin, hi + margin]`.
    pub fn covering(lo: f64, hi: f64, margin: f64, len: usize) -> Self {
        assert!(len >= 2 && hi >= lo && margin >= 0.0);
        let a = lo - margin;
        let b = hi + margin;
        let step = if b > a { (b - a) / (len - 1) as f64 } else { 1.0 };
        Grid { start: a, step, len }
    }

    /// Quadrature grid for smoothing data on `[lo, hi]` with bandwidth
    /// `margin_h`, resolved finely enough (at least four nodes per
    /// `resolve_h`) that the trapezoid rule sees the kernel as smooth.
    pub fn for_smoothing(lo: f64, hi: f64, resolve_h: f64, margin_h: f64) -> Self {
        assert!(resolve_h > 0.0 && margin_h > 0.0 && hi >= lo);
        let margin = GRID_MARGIN_BANDWIDTHS * margin_h;
        let span = (hi - lo) + 2.0 * margin;
        let needed = (span / (0.25 * resolve_h)).ceil() as usize + 1;
        let len = needed.clamp(GRID_POINTS, 1 << 16);
        Grid::covering(lo, hi, margin, len)
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|i| self.point(i))
    }

    /// Trapezoid weight of node `i` (half steps at the ends).
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.len {
            0.5 * self.step
        } else {
            self.step
        }
    }

    pub fn end(&self) -> f64 {
        self.point(self.len - 1)
    }
}

/// A weighted Gaussian kernel density estimate on the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousKde {
    support: Vec<f64>,
    weights: Vec<f64>,
    h: f64,
}

impl ContinuousKde {
    pub fn new(support: Vec<f64>, weights: Vec<f64>, h: f64) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("kernel density estimate needs support points"));
        }
        if support.len() != weights.len() {
            return Err(Error::LengthMismatch { expected: support.len(), got: weights.len() });
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
        }
        let mut sum = 0.0;
        for (&s, &w) in support.iter().zip(&weights) {
            if !s.is_finite() || !w.is_finite() || w < 0.0 {
                return Err(Error::invalid("kde support/weights must be finite, weights >= 0"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("kde weights must sum to 1, got {sum}")));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("kde needs at least one positive weight"));
        }
        Ok(ContinuousKde { support, weights, h })
    }

    /// Equal-weight estimate from raw observations.
    pub fn from_sample(sample: &[f64], h: f64) -> Result<Self> {
        let w = 1.0 / sample.len() as f64;
        ContinuousKde::new(sample.to_vec(), vec![w; sample.len()], h)
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Density at `a`; strictly positive for any finite `a`.
    pub fn density_at(&self, a: f64) -> f64 {
        let mut acc = 0.0;
        for (&s, &w) in self.support.iter().zip(&self.weights) {
            acc += w * scaled_kernel(a - s, self.h);
        }
        acc.max(f64::MIN_POSITIVE)
    }

    /// Log density at `a`, evaluated by a shifted log-sum-exp so that points
    /// far in the tails do not underflow, then floored at
    /// [`LOG_DENSITY_FLOOR`].
    pub fn ln_density_at(&self, a: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for (&s, &w) in self.support.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let u = (a - s) / self.h;
            let e = w.ln() - 0.5 * u * u;
            if e > best {
                best = e;
            }
        }
        let mut acc = 0.0;
        for (&s, &w) in self.support.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let u = (a - s) / self.h;
            acc += (w.ln() - 0.5 * u * u - best).exp();
        }
        let ln = best + acc.ln() - (self.h * stats::SQRT_2PI).ln();
        ln.max(LOG_DENSITY_FLOOR)
    }

    /// Mean of the estimate (the kernel is symmetric, so this is the
    /// weighted mean of the support).
    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.weights).map(|(&s, &w)| w * s).sum()
    }

    /// CDF of the Gaussian-mixture estimate.
    pub fn cdf(&self, q: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .map(|(&s, &w)| w * normal_cdf((q - s) / self.h))
            .sum()
    }

    /// `tau`-quantile of the estimate.
    pub fn quantile(&self, tau: f64) -> f64 {
        assert!(tau > 0.0 && tau < 1.0);
        let lo = self.support.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * self.h;
        let hi = self.support.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * self.h;
        stats::bisect(|q| self.cdf(q) - tau, lo, hi, 1e-10 * (1.0 + hi - lo))
    }

    /// `tau`-expectile of the estimate, from the expectile identity with the
    /// mixture's closed-form partial means.
    pub fn expectile(&self, tau: f64) -> f64 {
        assert!(tau > 0.0 && tau < 1.0);
        // For X ~ N(m, h^2): E[(X-e)+] = (m-e)Phi((m-e)/h) + h phi((m-e)/h).
        let upper = |e: f64| {
            self.support
                .iter()
                .zip(&self.weights)
                .map(|(&m, &w)| {
                    let d = (m - e) / self.h;
                    w * ((m - e) * normal_cdf(d) + self.h * normal_pdf(d))
                })
                .sum::<f64>()
        };
        let lower = |e: f64| upper(e) - (self.mean() - e);
        let lo = self.support.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * self.h;
        let hi = self.support.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * self.h;
        stats::bisect(
            |e| tau * upper(e) - (1.0 - tau) * lower(e),
            lo,
            hi,
            1e-10 * (1.0 + hi - lo),
        )
    }

    /// Quadrature grid covering the support with the standard margin.
    pub fn grid(&self) -> Grid {
        let (lo, hi) = self.support_range();
        Grid::for_smoothing(lo, hi, self.h, self.h)
    }

    fn support_range(&self) -> (f64, f64) {
        let lo = self.support.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.support.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Tabulates the log density on the standard grid.
    pub fn log_table(&self) -> LogDensityTable {
        self.log_table_for(self.h)
    }

    /// Tabulates the log density on a grid fine enough for smoothing with
    /// bandwidth `smooth_h` (which may differ from the estimate's own).
    pub fn log_table_for(&self, smooth_h: f64) -> LogDensityTable {
        let (lo, hi) = self.support_range();
        let grid = Grid::for_smoothing(lo, hi, self.h.min(smooth_h), self.h.max(smooth_h));
        let ln_values = grid.points().map(|a| self.ln_density_at(a)).collect();
        LogDensityTable { grid, ln_values }
    }
}

/// Probability masses of a categorical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPmf {
    probs: Vec<f64>,
}

impl CategoricalPmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("pmf needs at least one level"));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("pmf entries must be nonnegative and finite"));
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("pmf must sum to 1, got {sum}")));
        }
        Ok(CategoricalPmf { probs })
    }

    pub fn cardinality(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mass(&self, level: usize) -> Result<f64> {
        self.probs
            .get(level)
            .copied()
            .ok_or(Error::InvalidLevel { level, cardinality: self.probs.len() })
    }
}

/// A univariate density: kernel estimate for continuous variables, mass
/// table for categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UnivariateDensityRep {
    Continuous(ContinuousKde),
    Categorical(CategoricalPmf),
}

impl UnivariateDensityRep {
    pub fn as_continuous(&self) -> Option<&ContinuousKde> {
        match self {
            UnivariateDensityRep::Continuous(k) => Some(k),
            UnivariateDensityRep::Categorical(_) => None,
        }
    }

    pub fn as_categorical(&self) -> Option<&CategoricalPmf> {
        match self {
            UnivariateDensityRep::Categorical(p) => Some(p),
            UnivariateDensityRep::Continuous(_) => None,
        }
    }
}

/// Density (continuous) or mass (categorical) of `rep` at a point.
pub fn kernel_density_at(rep: &UnivariateDensityRep, at: &XValue) -> Result<f64> {
    match (rep, at) {
        (UnivariateDensityRep::Continuous(kde), XValue::Real(a)) => Ok(kde.density_at(*a)),
        (UnivariateDensityRep::Categorical(pmf), XValue::Level(l)) => pmf.mass(*l),
        _ => Err(Error::invalid("value kind does not match the density representation")),
    }
}

/// A log density tabulated on a quadrature grid; the unit the smoother
/// operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityTable {
    pub grid: Grid,
    pub ln_values: Vec<f64>,
}

impl LogDensityTable {
    /// `(S ln f)(x)` by trapezoidal quadrature: the kernel-weighted average
    /// of the tabulated log density around `x`.
    pub fn smoothed_log_at(&self, h: f64, x: f64) -> f64 {
        let inv_h = 1.0 / h;
        let norm = inv_h / stats::SQRT_2PI;
        let mut acc = 0.0;
        let n = self.grid.len;
        for (i, &lnf) in self.ln_values.iter().enumerate() {
            let u = (x - self.grid.point(i)) * inv_h;
            let mut w = self.grid.step;
            if i == 0 || i + 1 == n {
                w *= 0.5;
            }
            acc += w * (-0.5 * u * u).exp() * lnf;
        }
        acc * norm
    }

    /// Weights `w_g = trapezoid_g * ln f_g` used by the fitting loop's
    /// matrix form of the smoother.
    pub fn weighted_ln_values(&self) -> Vec<f64> {
        self.ln_values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.grid.weight(i) * v)
            .collect()
    }
}

/// A function tabulated on a grid, the public face of the smoother output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    /// Linear interpolation inside the grid range; clamps outside.
    pub fn eval(&self, a: f64) -> f64 {
        let n = self.grid.len();
        if a <= self.grid[0] {
            return self.values[0];
        }
        if a >= self.grid[n - 1] {
            return self.values[n - 1];
        }
        let step = self.grid[1] - self.grid[0];
        let pos = (a - self.grid[0]) / step;
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

/// The nonlinear smoother `N f = exp{S ln f}` applied to a kernel density
/// estimate with smoothing bandwidth `h`, evaluated on the estimate's grid.
pub fn log_smooth(kde: &ContinuousKde, h: f64) -> GridFunction {
    let table = kde.log_table_for(h);
    let grid: Vec<f64> = table.grid.points().collect();
    let values = grid
        .iter()
        .map(|&a| table.smoothed_log_at(h, a).max(LOG_DENSITY_FLOOR).exp())
        .collect();
    GridFunction { grid, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn standard_normal_kde() -> ContinuousKde {
        // A single kernel at 0 with unit bandwidth is exactly N(0, 1).
        ContinuousKde::new(vec![0.0], vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn bandwidth_rules() {
        let pow = KernelConfig::default();
        assert_relative_eq!(select_bandwidth(100_000, &pow).unwrap(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(select_bandwidth(32, &pow).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(select_bandwidth(1, &KernelConfig::explicit(0.5)).unwrap(), 0.5);
        assert!(select_bandwidth(1, &pow).is_err());
        assert!(select_bandwidth(10, &KernelConfig::explicit(-1.0)).is_err());
    }

    #[test]
    fn kernel_peak_value() {
        let kde = standard_normal_kde();
        assert_relative_eq!(kde.density_at(0.0), 0.3989422804014327, epsilon = 1e-12);
    }

    #[test]
    fn two_point_mixture_density() {
        let kde = ContinuousKde::new(vec![-1.0, 1.0], vec![0.5, 0.5], 1.0).unwrap();
        // 0.5 phi(1) + 0.5 phi(-1) = phi(1)
        assert_relative_eq!(kde.density_at(0.0), normal_pdf(1.0), epsilon = 1e-12);
    }

    #[test]
    fn categorical_lookup_and_range_check() {
        let pmf = CategoricalPmf::new(vec![0.3, 0.7]).unwrap();
        let rep = UnivariateDensityRep::Categorical(pmf);
        assert_eq!(kernel_density_at(&rep, &XValue::Level(1)).unwrap(), 0.7);
        assert!(matches!(
            kernel_density_at(&rep, &XValue::Level(2)),
            Err(Error::InvalidLevel { level: 2, cardinality: 2 })
        ));
    }

    #[test]
    fn ln_density_matches_direct_log() {
        let kde = ContinuousKde::new(vec![-0.4, 0.9, 2.0], vec![0.2, 0.5, 0.3], 0.3).unwrap();
        for &a in &[-1.0, 0.0, 0.7, 2.5] {
            assert_relative_eq!(kde.ln_density_at(a), kde.density_at(a).ln(), epsilon = 1e-12);
        }
        // Far tail: direct density underflows gracefully, log stays floored.
        assert!(kde.ln_density_at(1e6) >= LOG_DENSITY_FLOOR);
    }

    #[test]
    fn kde_integrates_to_one_on_grid() {
        let kde = ContinuousKde::new(vec![-1.0, 0.3, 4.0], vec![0.25, 0.4, 0.35], 0.5).unwrap();
        let grid = kde.grid();
        let total: f64 = (0..grid.len)
            .map(|i| grid.weight(i) * kde.density_at(grid.point(i)))
            .sum();
        assert!((0.995..=1.005).contains(&total), "integral {total}");
    }

    #[test]
    fn smoother_is_identity_on_constants() {
        // Constant log table on a wide grid: interior smoothing returns it.
        let grid = Grid::covering(-10.0, 10.0, 0.0, GRID_POINTS);
        let table = LogDensityTable { grid: grid.clone(), ln_values: vec![0.7; GRID_POINTS] };
        let h = 0.4;
        for &x in &[-4.0, -1.0, 0.0, 2.5, 4.0] {
            let s = table.smoothed_log_at(h, x);
            assert!((s - 0.7).abs() < 1e-8, "S const at {x}: {s}");
        }
    }

    #[test]
    fn smoothing_gaussian_log_density_stays_quadratic() {
        // For f = N(0,1): S ln f(a) = -(a^2 + h^2)/2 - ln sqrt(2 pi).
        let kde = standard_normal_kde();
        let table = kde.log_table();
        let h = 0.25;
        for &a in &[-1.5, -0.3, 0.0, 0.8, 2.0] {
            let expected = -(a * a + h * h) / 2.0 - stats::SQRT_2PI.ln();
            assert_relative_eq!(table.smoothed_log_at(h, a), expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn smoothed_density_approaches_f_as_h_shrinks() {
        let kde = standard_normal_kde();
        let mut last = f64::INFINITY;
        for &h in &[0.5, 0.25, 0.1] {
            let nf = log_smooth(&kde, h);
            let sup = nf
                .grid
                .iter()
                .zip(&nf.values)
                .filter(|(a, _)| a.abs() < 3.0)
                .map(|(&a, &v)| (v - kde.density_at(a)).abs())
                .fold(0.0f64, f64::max)
                ;
            assert!(sup < last, "sup distance should shrink with h: {sup} vs {last}");
            last = sup;
        }
        // And the h -> 0 limit reproduces the density itself
        // (analytically N f = f * exp(-h^2/2) for the Gaussian fixture).
        let nf = log_smooth(&kde, 0.02);
        for (&a, &v) in nf.grid.iter().zip(&nf.values) {
            if a.abs() < 3.0 {
                assert_relative_eq!(v, kde.density_at(a), epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn kde_location_functionals() {
        let kde = ContinuousKde::new(vec![-1.0, 2.0], vec![0.25, 0.75], 0.7).unwrap();
        assert_relative_eq!(kde.mean(), 0.25 * -1.0 + 0.75 * 2.0, epsilon = 1e-12);
        let med = kde.quantile(0.5);
        assert_relative_eq!(kde.cdf(med), 0.5, epsilon = 1e-9);
        // Expectile at 0.5 equals the mean.
        assert_relative_eq!(kde.expectile(0.5), kde.mean(), epsilon = 1e-7);
        // Monotone in tau.
        assert!(kde.quantile(0.75) > med);
        assert!(kde.expectile(0.75) > kde.expectile(0.25));
    }
}
