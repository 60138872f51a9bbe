//! Synthetic benchmark designs: a two-class mixture with four proxy
//! variables, two regression covariates, and configurable component / noise
//! distributions, plus the exact Bayes rules used as evaluation oracles.
//!
//! Every design uses `K = 2`, equal mixing weights, proxy means at `-xi` and
//! `+xi` in each of the four dimensions, and true coefficients
//! `delta = (-1, 1)`, `gamma = (1, 1)`. The separation `xi` is calibrated so
//! that the optimal classifier on the proxies alone has a target error rate
//! (0.10 by default).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, XColumn};
use crate::error::{Error, Result};
use crate::model::RegressionCoefficients;
use crate::stats::{normal_cdf, normal_expectile, normal_pdf, normal_quantile};

/// Number of proxy dimensions in every design.
pub const SIM_D_X: usize = 4;
/// Number of classes in every design.
pub const SIM_K: usize = 2;
/// Default target error of the proxy-only Bayes rule.
pub const DEFAULT_TARGET_ERROR: f64 = 0.10;

/// Asymmetric-loss targets for the shifted-noise designs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum AsymTarget {
    Quantile { tau: f64 },
    Expectile { tau: f64 },
}

/// Distribution scenario.
///
/// * `Case1` — Gaussian components, Gaussian noise (well specified).
/// * `Case2` — Gaussian components, centered exponential noise.
/// * `Case3` — Student-t(3) components, Gaussian noise.
/// * `Case4` — Student-t(3) components and noise.
/// * `RobustStudent3` — alias of `Case4`, the heavy-tail robustness design.
/// * `Asym` — Gaussian components, noise `N(-c_tau, 1)` so the target
///   quantile/expectile of the noise is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum SimCase {
    Case1,
    Case2,
    Case3,
    Case4,
    RobustStudent3,
    Asym(AsymTarget),
}

/// Component-deviation family of a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaFamily {
    Gaussian,
    StudentT3,
}

impl SimCase {
    pub fn eta_family(&self) -> EtaFamily {
        match self {
            SimCase::Case1 | SimCase::Case2 | SimCase::Asym(_) => EtaFamily::Gaussian,
            SimCase::Case3 | SimCase::Case4 | SimCase::RobustStudent3 => EtaFamily::StudentT3,
        }
    }

    /// Mean of the noise distribution (all designs have centered noise
    /// except the shifted asymmetric ones).
    pub fn noise_mean(&self) -> f64 {
        match self {
            SimCase::Asym(target) => -compute_c_tau(*target),
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for SimCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimCase::Case1 => write!(f, "case1"),
            SimCase::Case2 => write!(f, "case2"),
            SimCase::Case3 => write!(f, "case3"),
            SimCase::Case4 => write!(f, "case4"),
            SimCase::RobustStudent3 => write!(f, "robust-student3"),
            SimCase::Asym(AsymTarget::Quantile { tau }) => write!(f, "asym-quantile:{tau}"),
            SimCase::Asym(AsymTarget::Expectile { tau }) => write!(f, "asym-expectile:{tau}"),
        }
    }
}

impl std::str::FromStr for SimCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_tau = |a: &str, s: &str| -> Result<f64> {
            let tau: f64 = a
                .parse()
                .map_err(|_| Error::invalid(format!("cannot parse tau in case '{s}'")))?;
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::invalid(format!("tau must be in (0,1), got {tau}")));
            }
            Ok(tau)
        };
        match s.split_once(':') {
            None => match s {
                "case1" => Ok(SimCase::Case1),
                "case2" => Ok(SimCase::Case2),
                "case3" => Ok(SimCase::Case3),
                "case4" => Ok(SimCase::Case4),
                "robust-student3" => Ok(SimCase::RobustStudent3),
                _ => Err(Error::invalid(format!("unknown simulation case '{s}'"))),
            },
            Some(("asym-quantile", a)) => {
                Ok(SimCase::Asym(AsymTarget::Quantile { tau: parse_tau(a, s)? }))
            }
            Some(("asym-expectile", a)) => {
                Ok(SimCase::Asym(AsymTarget::Expectile { tau: parse_tau(a, s)? }))
            }
            Some(_) => Err(Error::invalid(format!("unknown simulation case '{s}'"))),
        }
    }
}

/// A fully specified generative design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub case: SimCase,
    pub n: usize,
    pub seed: u64,
    /// Class separation of the proxy means.
    pub xi: f64,
}

impl SimDesign {
    pub fn new(case: SimCase, n: usize, seed: u64, xi: f64) -> Result<Self> {
        if n < 50 {
            return Err(Error::invalid(format!("designs need n >= 50, got {n}")));
        }
        if !(xi > 0.0) {
            return Err(Error::invalid(format!("xi must be positive, got {xi}")));
        }
        Ok(SimDesign { case, n, seed, xi })
    }

    /// Design with `xi` calibrated to the default 0.10 proxy-rule error.
    pub fn calibrated(case: SimCase, n: usize, seed: u64) -> Result<Self> {
        let xi = calibrate_xi(case.eta_family(), DEFAULT_TARGET_ERROR)?;
        SimDesign::new(case, n, seed, xi)
    }

    pub fn k(&self) -> usize {
        SIM_K
    }

    pub fn pi_true(&self) -> Vec<f64> {
        vec![0.5, 0.5]
    }

    pub fn coeffs_true(&self) -> RegressionCoefficients {
        RegressionCoefficients { gamma: vec![1.0, 1.0], delta: vec![-1.0, 1.0] }
    }

    /// Proxy mean of class `k` in every dimension.
    pub fn class_mean(&self, k: usize) -> f64 {
        if k == 0 {
            -self.xi
        } else {
            self.xi
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// The shift `c_tau`: the target quantile or expectile of the standard
/// normal, so that `N(-c_tau, 1)` noise has its target functional at zero.
pub fn compute_c_tau(target: AsymTarget) -> f64 {
    match target {
        AsymTarget::Quantile { tau } => normal_quantile(tau),
        AsymTarget::Expectile { tau } => normal_expectile(tau),
    }
}

/// Separation `xi` with a proxy-only Bayes error equal to `target_error`.
///
/// Gaussian deviations admit the closed form
/// `xi = Phi^{-1}(1 - target) / sqrt(d_x)`; heavy-tail deviations are solved
/// by bisection against a common-random-numbers Monte Carlo estimate of the
/// error (1e6 draws).
pub fn calibrate_xi(eta: EtaFamily, target_error: f64) -> Result<f64> {
    if !(target_error > 0.0 && target_error < 0.5) {
        return Err(Error::invalid(format!(
            "target error must be in (0, 0.5), got {target_error}"
        )));
    }
    match eta {
        EtaFamily::Gaussian => Ok(normal_quantile(1.0 - target_error) / (SIM_D_X as f64).sqrt()),
        EtaFamily::StudentT3 => {
            const DRAWS: usize = 1_000_000;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ca1b);
            let t3 = StudentT::new(3.0).expect("valid dof");
            let eta: Vec<f64> =
                (0..DRAWS * SIM_D_X).map(|_| t3.sample(&mut rng)).collect();
            let error_at = |xi: f64| -> f64 {
                let mut wrong = 0usize;
                for draw in eta.chunks_exact(SIM_D_X) {
                    let stat: f64 = draw
                        .iter()
                        .map(|&e| student_t3_ln_pdf(e + 2.0 * xi) - student_t3_ln_pdf(e))
                        .sum();
                    if stat > 0.0 {
                        wrong += 1;
                    }
                }
                wrong as f64 / DRAWS as f64
            };
            let (mut lo, mut hi) = (1e-3, 5.0);
            if error_at(lo) < target_error || error_at(hi) > target_error {
                return Err(Error::NoRoot { lo, hi, target: target_error });
            }
            while hi - lo > 1e-4 {
                let mid = 0.5 * (lo + hi);
                if error_at(mid) > target_error {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        }
    }
}

/// Log density of the Student t with 3 degrees of freedom.
#[inline]
pub fn student_t3_ln_pdf(x: f64) -> f64 {
    // ln(2 / (pi sqrt(3))) - 2 ln(1 + x^2/3)
    const LN_COEF: f64 = -1.000_888_849_623_509_8;
    LN_COEF - 2.0 * (1.0 + x * x / 3.0).ln()
}

/// Draws a dataset from the design. Deterministic given `(design, seed)`:
/// each record consumes its variates in a fixed order.
pub fn generate(design: &SimDesign) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let n = design.n;
    let coeffs = design.coeffs_true();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let t3 = StudentT::new(3.0).unwrap();
    let exp1 = Exp::new(1.0).unwrap();

    let mut u = nalgebra::DMatrix::zeros(n, 2);
    let mut x_cols = vec![vec![0.0f64; n]; SIM_D_X];
    let mut y = vec![0.0f64; n];
    let mut z = vec![0usize; n];

    for i in 0..n {
        let zi = usize::from(rng.random::<f64>() < 0.5);
        z[i] = zi;
        u[(i, 0)] = std_normal.sample(&mut rng);
        u[(i, 1)] = std_normal.sample(&mut rng);
        let mean = design.class_mean(zi);
        for col in x_cols.iter_mut() {
            let eta = match design.case.eta_family() {
                EtaFamily::Gaussian => std_normal.sample(&mut rng),
                EtaFamily::StudentT3 => t3.sample(&mut rng),
            };
            col[i] = mean + eta;
        }
        let eps = match design.case {
            SimCase::Case1 | SimCase::Case3 => std_normal.sample(&mut rng),
            SimCase::Case2 => exp1.sample(&mut rng) - 1.0,
            SimCase::Case4 | SimCase::RobustStudent3 => t3.sample(&mut rng),
            SimCase::Asym(target) => std_normal.sample(&mut rng) - compute_c_tau(target),
        };
        y[i] = u[(i, 0)] * coeffs.gamma[0]
            + u[(i, 1)] * coeffs.gamma[1]
            + coeffs.delta[zi]
            + eps;
    }

    let x = x_cols.into_iter().map(XColumn::Continuous).collect();
    Dataset::new(u, x, y, Some(z)).expect("generated data is well formed")
}

/// Exact posterior rules under the true generative design.
#[derive(Debug, Clone)]
pub struct BayesRules {
    design: SimDesign,
}

impl BayesRules {
    pub fn new(design: SimDesign) -> Self {
        BayesRules { design }
    }

    fn eta_ln_pdf(&self, v: f64) -> f64 {
        match self.design.case.eta_family() {
            EtaFamily::Gaussian => normal_pdf(v).ln(),
            EtaFamily::StudentT3 => student_t3_ln_pdf(v),
        }
    }

    fn eps_ln_pdf(&self, r: f64) -> f64 {
        match self.design.case {
            SimCase::Case1 | SimCase::Case3 => normal_pdf(r).ln(),
            SimCase::Case2 => {
                if r >= -1.0 {
                    -(r + 1.0)
                } else {
                    f64::NEG_INFINITY
                }
            }
            SimCase::Case4 | SimCase::RobustStudent3 => student_t3_ln_pdf(r),
            SimCase::Asym(target) => normal_pdf(r + compute_c_tau(target)).ln(),
        }
    }

    fn class_x_ln_lik(&self, x: &[f64], k: usize) -> f64 {
        let mean = self.design.class_mean(k);
        x.iter().map(|&xj| self.eta_ln_pdf(xj - mean)).sum()
    }

    /// Posterior over classes given the proxies alone.
    pub fn x_posterior(&self, x: &[f64]) -> [f64; 2] {
        softmax2(self.class_x_ln_lik(x, 0), self.class_x_ln_lik(x, 1))
    }

    /// Posterior over classes given proxies, covariates and target.
    pub fn xy_posterior(&self, u: &[f64], x: &[f64], y: f64) -> [f64; 2] {
        let coeffs = self.design.coeffs_true();
        let base = y - coeffs.u_effect(u);
        let l0 = self.class_x_ln_lik(x, 0) + self.eps_ln_pdf(base - coeffs.delta[0]);
        let l1 = self.class_x_ln_lik(x, 1) + self.eps_ln_pdf(base - coeffs.delta[1]);
        softmax2(l0, l1)
    }

    /// The mean-optimal predictor `E[Y | u, x]` under the true model.
    pub fn predict_mean(&self, u: &[f64], x: &[f64]) -> f64 {
        let coeffs = self.design.coeffs_true();
        let post = self.x_posterior(x);
        coeffs.u_effect(u)
            + post[0] * coeffs.delta[0]
            + post[1] * coeffs.delta[1]
            + self.design.case.noise_mean()
    }
}

fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
    if l0 == f64::NEG_INFINITY && l1 == f64::NEG_INFINITY {
        return [0.5, 0.5];
    }
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_calibration_closed_form() {
        let xi = calibrate_xi(EtaFamily::Gaussian, 0.10).unwrap();
        assert_relative_eq!(xi, 0.6408, epsilon = 5e-4);
        assert_relative_eq!(xi, normal_quantile(0.90) / 2.0, epsilon = 1e-12);
        // No separation needed for a coin-flip target.
        let nearly_half = calibrate_xi(EtaFamily::Gaussian, 0.499).unwrap();
        assert!(nearly_half < 0.01);
        assert!(calibrate_xi(EtaFamily::Gaussian, 0.6).is_err());
    }

    #[test]
    fn c_tau_values() {
        assert_relative_eq!(
            compute_c_tau(AsymTarget::Quantile { tau: 0.75 }),
            0.6744897501960817,
            epsilon = 1e-9
        );
        assert!(compute_c_tau(AsymTarget::Quantile { tau: 0.5 }).abs() < 1e-12);
        assert!(compute_c_tau(AsymTarget::Expectile { tau: 0.5 }).abs() < 1e-10);
    }

    #[test]
    fn generation_is_deterministic() {
        let design = SimDesign::calibrated(SimCase::Case1, 200, 9).unwrap();
        let a = generate(&design);
        let b = generate(&design);
        assert_eq!(a, b);
        let c = generate(&design.with_seed(10));
        assert_ne!(a, c);
    }

    #[test]
    fn class_balance_and_means() {
        let design = SimDesign::calibrated(SimCase::Case1, 100_000, 4).unwrap();
        let data = generate(&design);
        let z = data.true_z().unwrap();
        let n1 = z.iter().filter(|&&v| v == 1).count() as f64;
        let n = design.n as f64;
        assert!((n1 / n - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
        // Within class 0 the proxy mean is -xi.
        let x0 = match data.x_column(0) {
            XColumn::Continuous(v) => v,
            _ => unreachable!(),
        };
        let (mut s, mut c) = (0.0, 0usize);
        for (i, &zi) in z.iter().enumerate() {
            if zi == 0 {
                s += x0[i];
                c += 1;
            }
        }
        assert!((s / c as f64 + design.xi).abs() < 0.02);
    }

    #[test]
    fn case2_noise_is_centered() {
        let design = SimDesign::calibrated(SimCase::Case2, 200_000, 5).unwrap();
        let data = generate(&design);
        let coeffs = design.coeffs_true();
        let z = data.true_z().unwrap();
        let mean_eps: f64 = (0..data.n())
            .map(|i| data.y()[i] - coeffs.u_effect(&data.u_row(i)) - coeffs.delta[z[i]])
            .sum::<f64>()
            / data.n() as f64;
        assert!(mean_eps.abs() < 0.01, "mean eps {mean_eps}");
    }

    #[test]
    fn asym_design_has_zero_target_quantile() {
        let tau = 0.75;
        let design = SimDesign::calibrated(
            SimCase::Asym(AsymTarget::Quantile { tau }),
            200_000,
            6,
        )
        .unwrap();
        let data = generate(&design);
        let coeffs = design.coeffs_true();
        let z = data.true_z().unwrap();
        let eps: Vec<f64> = (0..data.n())
            .map(|i| data.y()[i] - coeffs.u_effect(&data.u_row(i)) - coeffs.delta[z[i]])
            .collect();
        let q = crate::stats::quantile(&eps, tau);
        assert!(q.abs() < 0.01, "tau-quantile of eps {q}");
    }

    #[test]
    fn x_rule_on_symmetry_axis_is_even() {
        let design = SimDesign::calibrated(SimCase::Case1, 100, 1).unwrap();
        let rules = BayesRules::new(design);
        let post = rules.x_posterior(&[0.0; 4]);
        assert_relative_eq!(post[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_x_rule_reduces_to_sum_threshold() {
        let design = SimDesign::calibrated(SimCase::Case1, 100, 1).unwrap();
        let rules = BayesRules::new(design);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sum: f64 = x.iter().sum();
            let post = rules.x_posterior(&x);
            if sum > 1e-9 {
                assert!(post[1] > 0.5, "sum {sum} but post {post:?}");
            } else if sum < -1e-9 {
                assert!(post[0] > 0.5, "sum {sum} but post {post:?}");
            }
        }
    }

    #[test]
    fn joint_rule_beats_x_rule_on_agreement() {
        let design = SimDesign::calibrated(SimCase::Case1, 100_000, 12).unwrap();
        let data = generate(&design);
        let rules = BayesRules::new(design);
        let z = data.true_z().unwrap();
        let (mut agree_x, mut agree_xy) = (0.0, 0.0);
        for i in 0..data.n() {
            let x: Vec<f64> = (0..4).map(|j| match data.x_value(i, j) {
                crate::data::XValue::Real(v) => v,
                _ => unreachable!(),
            }).collect();
            let u = data.u_row(i);
            agree_x += rules.x_posterior(&x)[z[i]];
            agree_xy += rules.xy_posterior(&u, &x, data.y()[i])[z[i]];
        }
        assert!(
            agree_xy > agree_x,
            "joint {agree_xy} should exceed proxy-only {agree_x}"
        );
    }

    #[test]
    fn t3_log_density_matches_reference() {
        use statrs::distribution::{Continuous, StudentsT};
        let t = StudentsT::new(0.0, 1.0, 3.0).unwrap();
        for &x in &[-4.0, -1.0, 0.0, 0.5, 2.0] {
            assert_relative_eq!(student_t3_ln_pdf(x), t.ln_pdf(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn case_names_round_trip() {
        let cases = [
            SimCase::Case1,
            SimCase::Case2,
            SimCase::Case3,
            SimCase::Case4,
            SimCase::RobustStudent3,
            SimCase::Asym(AsymTarget::Quantile { tau: 0.9 }),
            SimCase::Asym(AsymTarget::Expectile { tau: 0.75 }),
        ];
        for c in cases {
            let parsed: SimCase = c.to_string().parse().unwrap();
            assert_eq!(parsed, c);
        }
    }
}
