//! Loss functions for the regression part of the joint model.
//!
//! Each loss `L` comes with its almost-everywhere derivative `rho`; the
//! regression functional is defined by the conditional moment condition
//! `E[rho(eps) | V] = 0`, so `rho` (not `L`) is what the estimating
//! equations see. `loss_derivative` is the exact a.e. derivative of
//! `loss_value` for every variant, which the finite-difference tests rely on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Choice of regression loss.
///
/// * `Quadratic` — mean regression, `L(t) = t^2`.
/// * `Absolute` — median regression, `L(t) = |t|`.
/// * `Huber { c }` — quadratic inside `[-c, c]`, linear outside.
/// * `LogCosh` — smooth robust loss, `L(t) = ln cosh t`.
/// * `Quantile { tau }` — check loss `L(t) = t (tau - 1{t <= 0})`, minimized
///   at the `tau`-quantile.
/// * `Expectile { tau }` — asymmetric squared loss
///   `L(t) = |tau - 1{t <= 0}| t^2`, minimized at the `tau`-expectile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Quadratic,
    Absolute,
    Huber { c: f64 },
    LogCosh,
    Quantile { tau: f64 },
    Expectile { tau: f64 },
}

impl LossSpec {
    /// Checks the loss parameters: `tau` strictly inside (0, 1), `c > 0`.
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Huber { c } => {
                if !(c > 0.0) || !c.is_finite() {
                    return Err(Error::invalid(format!("huber threshold must be > 0, got {c}")));
                }
            }
            LossSpec::Quantile { tau } | LossSpec::Expectile { tau } => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(Error::invalid(format!(
                        "tau must lie strictly inside (0, 1), got {tau}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Evaluates `L(t)`. Nonnegative, zero at `t = 0`, convex.
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            LossSpec::Quadratic => t * t,
            LossSpec::Absolute => t.abs(),
            LossSpec::Huber { c } => {
                let a = t.abs();
                if a <= c {
                    0.5 * t * t
                } else {
                    c * a - 0.5 * c * c
                }
            }
            // ln cosh t = |t| - ln 2 + ln(1 + e^{-2|t|}), stable for large |t|.
            LossSpec::LogCosh => {
                let a = t.abs();
                a - std::f64::consts::LN_2 + (-2.0 * a).exp().ln_1p()
            }
            LossSpec::Quantile { tau } => t * (tau - if t <= 0.0 { 1.0 } else { 0.0 }),
            LossSpec::Expectile { tau } => {
                let w = if t <= 0.0 { 1.0 - tau } else { tau };
                w * t * t
            }
        }
    }

    /// Evaluates `rho(t)`, the a.e. derivative of [`LossSpec::value`].
    ///
    /// At kinks the left limit is used (the indicator `1{t <= 0}` includes
    /// equality), so `rho(0) = tau - 1` for the quantile loss and `-1` for
    /// the absolute loss.
    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            LossSpec::Quadratic => 2.0 * t,
            LossSpec::Absolute => {
                if t <= 0.0 {
                    -1.0
                } else {
                    1.0
                }
            }
            LossSpec::Huber { c } => t.clamp(-c, c),
            LossSpec::LogCosh => t.tanh(),
            LossSpec::Quantile { tau } => tau - if t <= 0.0 { 1.0 } else { 0.0 },
            LossSpec::Expectile { tau } => {
                2.0 * t * if t <= 0.0 { 1.0 - tau } else { tau }
            }
        }
    }

    /// Values of `t` where `L` is not differentiable (finite-difference
    /// checks must stay away from these).
    pub fn kinks(&self) -> Vec<f64> {
        match *self {
            LossSpec::Absolute | LossSpec::Quantile { .. } | LossSpec::Expectile { .. } => {
                vec![0.0]
            }
            LossSpec::Huber { c } => vec![-c, c],
            LossSpec::Quadratic | LossSpec::LogCosh => vec![],
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LossSpec::Quadratic => write!(f, "quadratic"),
            LossSpec::Absolute => write!(f, "absolute"),
            LossSpec::Huber { c } => write!(f, "huber:{c}"),
            LossSpec::LogCosh => write!(f, "logcosh"),
            LossSpec::Quantile { tau } => write!(f, "quantile:{tau}"),
            LossSpec::Expectile { tau } => write!(f, "expectile:{tau}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// Parses `quadratic`, `absolute`, `logcosh`, `huber:C`, `quantile:TAU`,
    /// `expectile:TAU`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let parse_arg = |what: &str| -> Result<f64> {
            arg.ok_or_else(|| Error::invalid(format!("{name} requires a {what}, e.g. {name}:0.75")))?
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("cannot parse {what} in loss spec '{s}'")))
        };
        let spec = match name {
            "quadratic" => LossSpec::Quadratic,
            "absolute" | "median" => LossSpec::Absolute,
            "logcosh" => LossSpec::LogCosh,
            "huber" => LossSpec::Huber { c: parse_arg("threshold")? },
            "quantile" => LossSpec::Quantile { tau: parse_arg("tau")? },
            "expectile" => LossSpec::Expectile { tau: parse_arg("tau")? },
            _ => return Err(Error::invalid(format!("unknown loss '{s}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// All losses with default parameters used by the benchmark suite.
pub fn benchmark_losses() -> Vec<LossSpec> {
    vec![
        LossSpec::Quadratic,
        LossSpec::Absolute,
        LossSpec::Huber { c: 1.0 },
        LossSpec::LogCosh,
        LossSpec::Quantile { tau: 0.75 },
        LossSpec::Expectile { tau: 0.75 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn quadratic_matches_catalogue() {
        assert_eq!(LossSpec::Quadratic.value(2.0), 4.0);
        assert_eq!(LossSpec::Quadratic.derivative(3.0), 6.0);
    }

    #[test]
    fn quantile_loss_at_zero_residual_is_zero() {
        assert_eq!(LossSpec::Quantile { tau: 0.5 }.value(0.0), 0.0);
    }

    #[test]
    fn huber_beyond_threshold_is_linear() {
        // c|t| - c^2/2 for |t| > c
        assert_eq!(LossSpec::Huber { c: 1.0 }.value(3.0), 2.5);
    }

    #[test]
    fn quantile_derivative_follows_indicator_convention() {
        // tau - 1{t <= 0}
        let rho = LossSpec::Quantile { tau: 0.75 }.derivative(-0.1);
        assert!((rho - (-0.25)).abs() < 1e-15);
        // equality counts as <= 0
        assert_eq!(LossSpec::Quantile { tau: 0.75 }.derivative(0.0), -0.25);
    }

    #[test]
    fn expectile_half_reduces_to_half_quadratic_derivative() {
        let spec = LossSpec::Expectile { tau: 0.5 };
        for &t in &[-3.0, -0.2, 0.7, 12.0] {
            assert!((spec.derivative(t) - t).abs() < 1e-15);
        }
    }

    #[test]
    fn losses_are_positive_away_from_zero() {
        for spec in benchmark_losses() {
            assert_eq!(spec.value(0.0), 0.0, "{spec}");
            for &t in &[-5.0, -0.3, 1e-6, 0.4, 7.0] {
                assert!(spec.value(t) > 0.0, "{spec} at {t}");
            }
        }
    }

    #[test]
    fn derivative_matches_central_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let step = 1e-5;
        for spec in benchmark_losses() {
            let kinks = spec.kinks();
            let mut checked = 0;
            while checked < 100 {
                let t: f64 = rng.random_range(-4.0..4.0);
                if kinks.iter().any(|k| (t - k).abs() < 1e-3) {
                    continue;
                }
                let fd = (spec.value(t + step) - spec.value(t - step)) / (2.0 * step);
                assert!(
                    (fd - spec.derivative(t)).abs() < 1e-6,
                    "{spec} at t={t}: fd={fd}, rho={}",
                    spec.derivative(t)
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn derivative_is_nondecreasing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for spec in benchmark_losses() {
            for _ in 0..200 {
                let a: f64 = rng.random_range(-4.0..4.0);
                let b: f64 = rng.random_range(-4.0..4.0);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                assert!(
                    spec.derivative(lo) <= spec.derivative(hi) + 1e-12,
                    "{spec}: rho({lo}) > rho({hi})"
                );
            }
        }
    }

    #[test]
    fn parse_round_trips() {
        for spec in benchmark_losses() {
            let back: LossSpec = spec.to_string().parse().unwrap();
            assert_eq!(back, spec);
        }
        assert!("quantile:1.5".parse::<LossSpec>().is_err());
        assert!("huber:-1".parse::<LossSpec>().is_err());
        assert!("banana".parse::<LossSpec>().is_err());
    }
}
