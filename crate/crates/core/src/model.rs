//! Shared parameter containers and fit outputs.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossSpec;

/// Regression coefficients `beta = (gamma, delta)`.
///
/// `gamma` multiplies the observed covariates `U`; `delta` holds one fixed
/// group effect per class. The model carries no separate intercept — the
/// per-class `delta` plays that role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCoefficients {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RegressionCoefficients {
    pub fn new(gamma: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::invalid("at least one group effect is required"));
        }
        if gamma.iter().chain(delta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(RegressionCoefficients { gamma, delta })
    }

    pub fn zeros(d_u: usize, k: usize) -> Self {
        RegressionCoefficients { gamma: vec![0.0; d_u], delta: vec![0.0; k] }
    }

    pub fn d_u(&self) -> usize {
        self.gamma.len()
    }

    pub fn k(&self) -> usize {
        self.delta.len()
    }

    /// `u . gamma` for one record.
    pub fn u_effect(&self, u_row: &[f64]) -> f64 {
        self.gamma.iter().zip(u_row).map(|(g, u)| g * u).sum()
    }

    /// Residual of record `(u, y)` under class `k`.
    pub fn residual(&self, u_row: &[f64], y: f64, k: usize) -> f64 {
        y - self.u_effect(u_row) - self.delta[k]
    }

    /// Flat `(gamma, delta)` vector.
    pub fn flat(&self) -> Vec<f64> {
        self.gamma.iter().chain(self.delta.iter()).cloned().collect()
    }

    /// Returns a copy with classes reordered by `perm` (`perm[k]` is the old
    /// index that becomes class `k`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        RegressionCoefficients {
            gamma: self.gamma.clone(),
            delta: perm.iter().map(|&p| self.delta[p]).collect(),
        }
    }
}

/// Posterior class probabilities, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    t: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        for i in 0..t.nrows() {
            let mut sum = 0.0;
            for k in 0..t.ncols() {
                let v = t[(i, k)];
                if !(v >= -1e-12 && v <= 1.0 + 1e-12) {
                    return Err(Error::invalid(format!(
                        "responsibility out of [0,1] at ({i},{k}): {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(Responsibilities { t })
    }

    /// Hard labels as 0/1 rows.
    pub fn from_hard(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLevel { level: bad, cardinality: k });
        }
        let mut t = DMatrix::zeros(labels.len(), k);
        for (i, &l) in labels.iter().enumerate() {
            t[(i, l)] = 1.0;
        }
        Ok(Responsibilities { t })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Responsibilities { t: DMatrix::from_element(n, k, 1.0 / k as f64) }
    }

    pub fn n(&self) -> usize {
        self.t.nrows()
    }

    pub fn k(&self) -> usize {
        self.t.ncols()
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.t[(i, k)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// Class proportions: column means of the matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.k()).map(|k| self.t.column(k).sum() / n).collect()
    }

    /// Most probable class per record.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| {
                (0..self.k())
                    .max_by(|&a, &b| self.t[(i, a)].total_cmp(&self.t[(i, b)]))
                    .unwrap()
            })
            .collect()
    }

    /// Returns a copy with columns reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let t = DMatrix::from_fn(self.n(), self.k(), |i, k| self.t[(i, perm[k])]);
        Responsibilities { t }
    }
}

/// Full parameter set of the joint model, generic over the component-density
/// representation `C` and the noise representation `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModelParams<C, N> {
    pub pi: Vec<f64>,
    pub coeffs: RegressionCoefficients,
    pub components: Vec<C>,
    pub noise: N,
}

impl<C, N> JointModelParams<C, N> {
    pub fn new(pi: Vec<f64>, coeffs: RegressionCoefficients, components: Vec<C>, noise: N) -> Result<Self> {
        validate_simplex(&pi)?;
        if components.len() != pi.len() || coeffs.k() != pi.len() {
            return Err(Error::LengthMismatch { expected: pi.len(), got: components.len() });
        }
        Ok(JointModelParams { pi, coeffs, components, noise })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }
}

/// Checks that mixing weights are strictly positive and sum to one.
pub fn validate_simplex(pi: &[f64]) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::invalid("mixing weights must be nonempty"));
    }
    if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::invalid("mixing weights must be strictly positive"));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("mixing weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Estimation route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    SimultaneousParametric,
    SimultaneousSemiParametric,
    TwoStepParametric,
    TwoStepSemiParametric,
}

impl FitMethod {
    pub fn all() -> [FitMethod; 4] {
        [
            FitMethod::SimultaneousParametric,
            FitMethod::SimultaneousSemiParametric,
            FitMethod::TwoStepParametric,
            FitMethod::TwoStepSemiParametric,
        ]
    }
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FitMethod::SimultaneousParametric => "simultaneous-parametric",
            FitMethod::SimultaneousSemiParametric => "simultaneous-semiparametric",
            FitMethod::TwoStepParametric => "two-step-parametric",
            FitMethod::TwoStepSemiParametric => "two-step-semiparametric",
        };
        f.write_str(s)
    }
}

impl FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simultaneous-parametric" => Ok(FitMethod::SimultaneousParametric),
            "simultaneous-semiparametric" => Ok(FitMethod::SimultaneousSemiParametric),
            "two-step-parametric" => Ok(FitMethod::TwoStepParametric),
            "two-step-semiparametric" => Ok(FitMethod::TwoStepSemiParametric),
            _ => Err(Error::invalid(format!("unknown method '{s}'"))),
        }
    }
}

/// Convergence bookkeeping for an iterative fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Restarts triggered by degenerate components.
    pub restarts: usize,
    /// Iterations where the regression update had to be damped to keep the
    /// objective monotone (semi-parametric route only).
    pub damped_steps: usize,
}

impl Diagnostics {
    pub fn new() -> Self {
        Diagnostics { converged: false, iterations: 0, restarts: 0, damped_steps: 0 }
    }
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of any estimation route.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: FitMethod,
    pub loss: LossSpec,
    pub pi: Vec<f64>,
    pub coeffs: RegressionCoefficients,
    pub responsibilities: Responsibilities,
    /// Objective value per iterate (observed log-likelihood for EM, smoothed
    /// log-likelihood for the MM route, clustering objective for two-step).
    pub trajectory: Vec<f64>,
    pub objective: f64,
    pub diagnostics: Diagnostics,
    pub details: FitDetails,
}

/// Route-specific fitted objects.
#[derive(Debug, Clone)]
pub enum FitDetails {
    Parametric(crate::parametric::ParametricParams),
    SemiParametric(crate::semiparam::SemiParamModel),
    TwoStep {
        cluster: crate::two_step::ClusterModel,
    },
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// Reorders classes so `delta` is ascending; every class-indexed object
    /// is permuted consistently. Useful for reporting (mixture labels are
    /// arbitrary).
    pub fn canonicalize_by_delta(&mut self) {
        let k = self.k();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.sort_by(|&a, &b| self.coeffs.delta[a].total_cmp(&self.coeffs.delta[b]));
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return;
        }
        self.apply_permutation(&perm);
    }

    /// Applies `perm` (`perm[k]` = old index of new class `k`) to every
    /// class-indexed field.
    pub fn apply_permutation(&mut self, perm: &[usize]) {
        self.pi = perm.iter().map(|&p| self.pi[p]).collect();
        self.coeffs = self.coeffs.permuted(perm);
        self.responsibilities = self.responsibilities.permuted(perm);
        match &mut self.details {
            FitDetails::Parametric(p) => p.apply_permutation(perm),
            FitDetails::SemiParametric(m) => m.apply_permutation(perm),
            FitDetails::TwoStep { cluster } => cluster.apply_permutation(perm),
        }
    }
}
