//! The advised estimator: maximum smoothed likelihood for the semi-parametric
//! joint model, fitted by a majorization-minorization loop.
//!
//! The joint density is `sum_k pi_k prod_j f_kj(x_j) f_eps(y - u.gamma - delta_k)`
//! with nonparametric `f_kj` and `f_eps`. The smoothed log-likelihood replaces
//! each component density by `N f = exp(S ln f)`; one iteration computes
//! responsibilities from the smoothed densities (majorization), then updates
//! mixing weights, regression coefficients (responsibility-weighted loss fit)
//! and the kernel density estimates (minorization).
//!
//! All smoothing integrals are trapezoid sums over fixed per-dimension grids,
//! evaluated directly at the data points. Because the kernel matrix between
//! data points and grid nodes is shared by the density updates and the
//! smoothed evaluations, the surrogate optimality of each density update is
//! exact in floating point, and the loop is monotone. The regression update
//! is the one step without that guarantee, so it runs under a step-halving
//! guard on the smoothed log-likelihood (the zero step, which keeps the
//! previous coefficients and only refreshes the noise density, is always
//! acceptable).

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, XColumn, XValue};
use crate::error::{Error, Result};
use crate::init::standard_starts;
use crate::kernel::{
    scaled_kernel, select_bandwidth, CategoricalPmf, ContinuousKde, Grid, KernelConfig,
    LogDensityTable, UnivariateDensityRep, LOG_DENSITY_FLOOR,
};
use crate::loss::LossSpec;
use crate::model::{
    Diagnostics, FitDetails, FitMethod, FitResult, RegressionCoefficients, Responsibilities,
};
use crate::regression::{class_moment_residuals, weighted_loss_fit};

/// Laplace pseudo-count for categorical level frequencies.
const CATEGORICAL_PSEUDOCOUNT: f64 = 0.5;

/// Slack allowed when the guard compares smoothed log-likelihoods.
const MONOTONICITY_SLACK: f64 = 1e-12;

/// Controls for the majorization-minorization fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmSettings {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for MmSettings {
    fn default() -> Self {
        MmSettings {
            max_iter: 300,
            rel_tol: 1e-6,
            n_starts: 5,
            seed: 0,
            kernel: KernelConfig::default(),
        }
    }
}

impl MmSettings {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, n_starts: usize) -> Self {
        self.n_starts = n_starts;
        self
    }
}

/// Fitted semi-parametric joint model.
#[derive(Debug, Clone)]
pub struct SemiParamModel {
    pub pi: Vec<f64>,
    pub coeffs: RegressionCoefficients,
    /// Per class, per proxy column.
    pub component_densities: Vec<Vec<UnivariateDensityRep>>,
    /// Noise density over residuals.
    pub noise_density: ContinuousKde,
    pub bandwidth: f64,
    component_tables: Vec<Vec<Option<LogDensityTable>>>,
    noise_table: LogDensityTable,
}

impl SemiParamModel {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// Rebuilds the smoothing caches from the density representations.
    pub fn refresh_caches(&mut self) {
        self.component_tables = self
            .component_densities
            .iter()
            .map(|row| {
                row.iter()
                    .map(|rep| rep.as_continuous().map(|kde| kde.log_table()))
                    .collect()
            })
            .collect();
        self.noise_table = self.noise_density.log_table();
    }

    /// Log of `pi_k (N f_k)(w | u)` for each class at one record.
    pub fn log_smoothed_numerators(&self, u: &[f64], x: &[XValue], y: f64) -> Result<Vec<f64>> {
        let h = self.bandwidth;
        let base = y - self.coeffs.u_effect(u);
        let mut out = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let mut l = self.pi[k].ln();
            for (j, val) in x.iter().enumerate() {
                match (&self.component_densities[k][j], val) {
                    (UnivariateDensityRep::Continuous(_), XValue::Real(a)) => {
                        let table = self.component_tables[k][j]
                            .as_ref()
                            .expect("continuous density has a cache");
                        l += table.smoothed_log_at(h, *a);
                    }
                    (UnivariateDensityRep::Categorical(pmf), XValue::Level(lev)) => {
                        l += pmf.mass(*lev)?.ln();
                    }
                    _ => {
                        return Err(Error::invalid(
                            "record value kind does not match the fitted column type",
                        ))
                    }
                }
            }
            l += self.noise_table.smoothed_log_at(h, base - self.coeffs.delta[k]);
            out.push(l);
        }
        Ok(out)
    }

    /// `(N f_k)(w | u)` per class: the smoothed component densities at one
    /// record (mixing weights not included). Strictly positive.
    pub fn smoothed_component_density(&self, u: &[f64], x: &[XValue], y: f64) -> Result<Vec<f64>> {
        let nums = self.log_smoothed_numerators(u, x, y)?;
        Ok(nums
            .iter()
            .zip(&self.pi)
            .map(|(l, p)| (l - p.ln()).max(LOG_DENSITY_FLOOR).exp())
            .collect())
    }

    /// Posterior over classes given the full record.
    pub fn posterior(&self, u: &[f64], x: &[XValue], y: f64) -> Result<Vec<f64>> {
        let nums = self.log_smoothed_numerators(u, x, y)?;
        Ok(softmax(&nums))
    }

    /// Posterior over classes given the proxies alone (unsmoothed densities;
    /// `y` is unknown at prediction time).
    pub fn x_posterior(&self, x: &[XValue]) -> Result<Vec<f64>> {
        let mut lnums = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let mut l = self.pi[k].ln();
            for (j, val) in x.iter().enumerate() {
                match (&self.component_densities[k][j], val) {
                    (UnivariateDensityRep::Continuous(kde), XValue::Real(a)) => {
                        l += kde.ln_density_at(*a);
                    }
                    (UnivariateDensityRep::Categorical(pmf), XValue::Level(lev)) => {
                        l += pmf.mass(*lev)?.ln();
                    }
                    _ => {
                        return Err(Error::invalid(
                            "record value kind does not match the fitted column type",
                        ))
                    }
                }
            }
            lnums.push(l);
        }
        Ok(softmax(&lnums))
    }

    /// Loss-matched location of the fitted noise density: mean for
    /// quadratic/log-cosh/Huber, median for absolute, the tau-quantile or
    /// tau-expectile for the asymmetric losses.
    pub fn noise_location(&self, loss: &LossSpec) -> f64 {
        match *loss {
            LossSpec::Quadratic | LossSpec::LogCosh | LossSpec::Huber { .. } => {
                self.noise_density.mean()
            }
            LossSpec::Absolute => self.noise_density.quantile(0.5),
            LossSpec::Quantile { tau } => self.noise_density.quantile(tau),
            LossSpec::Expectile { tau } => self.noise_density.expectile(tau),
        }
    }

    /// Point prediction for a new record:
    /// `u.gamma + sum_k w_k(x) delta_k + m_eps`.
    pub fn predict(&self, u: &[f64], x: &[XValue], loss: &LossSpec) -> Result<f64> {
        let w = self.x_posterior(x)?;
        let group: f64 = w.iter().zip(&self.coeffs.delta).map(|(wk, d)| wk * d).sum();
        Ok(self.coeffs.u_effect(u) + group + self.noise_location(loss))
    }

    pub fn apply_permutation(&mut self, perm: &[usize]) {
        self.pi = perm.iter().map(|&p| self.pi[p]).collect();
        self.coeffs = self.coeffs.permuted(perm);
        self.component_densities =
            perm.iter().map(|&p| self.component_densities[p].clone()).collect();
        self.component_tables =
            perm.iter().map(|&p| self.component_tables[p].clone()).collect();
    }
}

/// The smoothed log-likelihood of `model` on `data`.
pub fn smoothed_loglik(data: &Dataset, model: &SemiParamModel) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.n() {
        let u = data.u_row(i);
        let x = data.x_row(i);
        let nums = model.log_smoothed_numerators(&u, &x, data.y()[i])?;
        total += log_sum_exp(&nums);
    }
    Ok(total)
}

/// Per-class moment diagnostics at the model's own posterior:
/// `(1/n) sum_i t_ik rho(r_ik)`.
pub fn moment_residual(data: &Dataset, model: &SemiParamModel, loss: &LossSpec) -> Result<Vec<f64>> {
    let n = data.n();
    let k = model.k();
    let mut t = nalgebra::DMatrix::zeros(n, k);
    for i in 0..n {
        let u = data.u_row(i);
        let x = data.x_row(i);
        let post = model.posterior(&u, &x, data.y()[i])?;
        for (kk, p) in post.iter().enumerate() {
            t[(i, kk)] = *p;
        }
    }
    let t = Responsibilities::new(t)?;
    Ok(class_moment_residuals(data, &t, loss, &model.coeffs))
}

fn softmax(lnums: &[f64]) -> Vec<f64> {
    let m = lnums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lnums.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Fitting engine
// ---------------------------------------------------------------------------

/// Kernel matrix between a set of evaluation/support points and a grid,
/// flattened row-major: `mat[p * grid.len + g] = K_h(points[p] - a_g)`.
fn kernel_matrix(points: &[f64], grid: &Grid, h: f64) -> Vec<f64> {
    let g = grid.len;
    let mut mat = vec![0.0; points.len() * g];
    for (p, &x) in points.iter().enumerate() {
        let row = &mut mat[p * g..(p + 1) * g];
        for (i, m) in row.iter_mut().enumerate() {
            *m = scaled_kernel(x - grid.point(i), h);
        }
    }
    mat
}

/// Immutable per-fit precomputations.
struct Engine<'a> {
    data: &'a Dataset,
    k: usize,
    h: f64,
    /// Continuous proxy columns: (column index, values, grid, kernel matrix).
    cont: Vec<ContDim<'a>>,
    /// Categorical proxy columns: (column index, levels, cardinality).
    cat: Vec<(usize, &'a [usize], usize)>,
    /// `None` disables the regression part (proxy-marginal fits).
    loss: Option<LossSpec>,
}

struct ContDim<'a> {
    column: usize,
    values: &'a [f64],
    grid: Grid,
    kmat: Vec<f64>,
}

/// Per-class log-density tables of one continuous dimension, plus the KDE
/// weights that generated them.
struct ContState {
    /// `ln f_kj` on the grid, one vector per class.
    ln_tables: Vec<Vec<f64>>,
    /// Quadrature-weighted `ln f` (trapezoid weight times `ln f`), per class.
    weighted: Vec<Vec<f64>>,
}

/// Mutable iteration state.
struct State {
    pi: Vec<f64>,
    coeffs: RegressionCoefficients,
    cont: Vec<ContState>,
    cat_pmfs: Vec<Vec<CategoricalPmf>>, // [cat dim][class]
    noise: Option<NoiseState>,
    /// Log numerators `ln pi_k + S ln f_k(w_i)`, row-major n x k.
    lnum: Vec<f64>,
    loglik: f64,
}

struct NoiseState {
    /// Residuals flattened `i * k + kk`.
    residuals: Vec<f64>,
    grid: Grid,
    ln_table: Vec<f64>,
    kmat: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(data: &'a Dataset, k: usize, loss: Option<LossSpec>, h: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        let mut cont = Vec::new();
        let mut cat = Vec::new();
        for (j, col) in data.x().iter().enumerate() {
            match col {
                XColumn::Continuous(v) => {
                    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let grid = Grid::for_smoothing(lo, hi, h, h);
                    let kmat = kernel_matrix(v, &grid, h);
                    cont.push(ContDim { column: j, values: v, grid, kmat });
                }
                XColumn::Categorical { levels, cardinality } => {
                    cat.push((j, levels.as_slice(), *cardinality));
                }
            }
        }
        Ok(Engine { data, k, h, cont, cat, loss })
    }

    fn n(&self) -> usize {
        self.data.n()
    }

    /// Weighted KDE tables for every continuous dimension and class:
    /// `f_kj(a_g) = (1 / (n pi_k)) sum_i t_ik K_h(x_ij - a_g)`.
    fn update_cont(&self, t: &Responsibilities, pi: &[f64]) -> Vec<ContState> {
        let n = self.n();
        self.cont
            .iter()
            .map(|dim| {
                let g = dim.grid.len;
                let mut ln_tables = Vec::with_capacity(self.k);
                let mut weighted = Vec::with_capacity(self.k);
                for kk in 0..self.k {
                    let norm = 1.0 / (n as f64 * pi[kk]);
                    let mut dens = vec![0.0f64; g];
                    for i in 0..n {
                        let w = t.get(i, kk);
                        if w == 0.0 {
                            continue;
                        }
                        let row = &dim.kmat[i * g..(i + 1) * g];
                        for (d, &m) in dens.iter_mut().zip(row) {
                            *d += w * m;
                        }
                    }
                    let ln: Vec<f64> = dens
                        .iter()
                        .map(|&d| (d * norm).ln().max(LOG_DENSITY_FLOOR))
                        .collect();
                    let w: Vec<f64> = ln
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| dim.grid.weight(i) * v)
                        .collect();
                    ln_tables.push(ln);
                    weighted.push(w);
                }
                ContState { ln_tables, weighted }
            })
            .collect()
    }

    /// Laplace-smoothed weighted level frequencies per categorical dimension
    /// and class.
    fn update_cat(&self, t: &Responsibilities) -> Vec<Vec<CategoricalPmf>> {
        let n = self.n();
        self.cat
            .iter()
            .map(|&(_, levels, card)| {
                (0..self.k)
                    .map(|kk| {
                        let mut counts = vec![CATEGORICAL_PSEUDOCOUNT; card];
                        let mut mass = CATEGORICAL_PSEUDOCOUNT * card as f64;
                        for i in 0..n {
                            let w = t.get(i, kk);
                            counts[levels[i]] += w;
                            mass += w;
                        }
                        let probs = counts.iter().map(|c| c / mass).collect();
                        CategoricalPmf::new(probs).expect("normalized by construction")
                    })
                    .collect()
            })
            .collect()
    }

    /// Residual-side state for given coefficients: the noise KDE
    /// `f_eps(a) = (1/n) sum_{i,k} t_ik K_h(r_ik - a)` on its own grid.
    fn update_noise(&self, t: &Responsibilities, coeffs: &RegressionCoefficients) -> Result<NoiseState> {
        let n = self.n();
        let mut residuals = vec![0.0; n * self.k];
        for i in 0..n {
            let u = self.data.u_row(i);
            let base = self.data.y()[i] - coeffs.u_effect(&u);
            for kk in 0..self.k {
                residuals[i * self.k + kk] = base - coeffs.delta[kk];
            }
        }
        let lo = residuals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let grid = Grid::for_smoothing(lo, hi, self.h, self.h);
        if residuals.len() * grid.len > 128_000_000 {
            return Err(Error::invalid(
                "residual smoothing grid too large; reduce n or supply an explicit bandwidth",
            ));
        }
        let kmat = kernel_matrix(&residuals, &grid, self.h);
        let g = grid.len;
        let mut dens = vec![0.0f64; g];
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            for kk in 0..self.k {
                let w = t.get(i, kk) * inv_n;
                if w == 0.0 {
                    continue;
                }
                let row = &kmat[(i * self.k + kk) * g..(i * self.k + kk + 1) * g];
                for (d, &m) in dens.iter_mut().zip(row) {
                    *d += w * m;
                }
            }
        }
        let ln_table: Vec<f64> =
            dens.iter().map(|&d| d.ln().max(LOG_DENSITY_FLOOR)).collect();
        Ok(NoiseState { residuals, grid, ln_table, kmat })
    }

    /// Log numerators and smoothed log-likelihood for a full parameter set.
    fn evaluate(
        &self,
        pi: &[f64],
        cont: &[ContState],
        cat_pmfs: &[Vec<CategoricalPmf>],
        noise: Option<&NoiseState>,
    ) -> (Vec<f64>, f64) {
        let n = self.n();
        let k = self.k;
        let mut lnum = vec![0.0f64; n * k];
        for i in 0..n {
            for kk in 0..k {
                lnum[i * k + kk] = pi[kk].ln();
            }
        }
        // Continuous proxies: S ln f at the data points via the cached kernel
        // matrices.
        for (dim, state) in self.cont.iter().zip(cont) {
            let g = dim.grid.len;
            for kk in 0..k {
                let v = &state.weighted[kk];
                for i in 0..n {
                    let row = &dim.kmat[i * g..(i + 1) * g];
                    let mut acc = 0.0;
                    for (&m, &w) in row.iter().zip(v) {
                        acc += m * w;
                    }
                    lnum[i * k + kk] += acc;
                }
            }
        }
        // Categorical proxies: exact masses.
        for ((_, levels, _), pmfs) in self.cat.iter().zip(cat_pmfs) {
            for kk in 0..k {
                let lnp: Vec<f64> = pmfs[kk].probs().iter().map(|p| p.ln()).collect();
                for i in 0..n {
                    lnum[i * k + kk] += lnp[levels[i]];
                }
            }
        }
        // Noise dimension: S ln f_eps at each class residual.
        if let Some(ns) = noise {
            let g = ns.grid.len;
            let weighted: Vec<f64> = ns
                .ln_table
                .iter()
                .enumerate()
                .map(|(i, &v)| ns.grid.weight(i) * v)
                .collect();
            for row_idx in 0..n * k {
                let row = &ns.kmat[row_idx * g..(row_idx + 1) * g];
                let mut acc = 0.0;
                for (&m, &w) in row.iter().zip(&weighted) {
                    acc += m * w;
                }
                lnum[row_idx] += acc;
            }
        }
        let mut loglik = 0.0;
        for i in 0..n {
            loglik += log_sum_exp(&lnum[i * k..(i + 1) * k]);
        }
        (lnum, loglik)
    }

    /// Majorization: responsibilities from the current log numerators.
    fn responsibilities(&self, lnum: &[f64]) -> Responsibilities {
        let n = self.n();
        let k = self.k;
        let mut t = nalgebra::DMatrix::zeros(n, k);
        for i in 0..n {
            let row = softmax(&lnum[i * k..(i + 1) * k]);
            for (kk, p) in row.iter().enumerate() {
                t[(i, kk)] = *p;
            }
        }
        Responsibilities::new(t).expect("softmax rows sum to one")
    }

    /// Initial state from a responsibility matrix.
    fn init_state(&self, t0: &Responsibilities) -> Result<State> {
        let pi = t0.column_means();
        for (kk, &p) in pi.iter().enumerate() {
            if p <= 0.0 {
                return Err(Error::DegenerateComponent { component: kk, mass: p });
            }
        }
        let coeffs = match self.loss {
            Some(loss) => {
                let init = RegressionCoefficients::zeros(self.data.d_u(), self.k);
                weighted_loss_fit(self.data, t0, &loss, &init)?.coeffs
            }
            None => RegressionCoefficients::zeros(self.data.d_u(), self.k),
        };
        let cont = self.update_cont(t0, &pi);
        let cat_pmfs = self.update_cat(t0);
        let noise = match self.loss {
            Some(_) => Some(self.update_noise(t0, &coeffs)?),
            None => None,
        };
        let (lnum, loglik) = self.evaluate(&pi, &cont, &cat_pmfs, noise.as_ref());
        Ok(State { pi, coeffs, cont, cat_pmfs, noise, lnum, loglik })
    }

    /// One majorization-minorization iteration. Returns the count of damping
    /// halvings used (0 for the plain update).
    fn iterate(&self, state: &mut State, degenerate_floor: f64) -> Result<usize> {
        let t = self.responsibilities(&state.lnum);
        let pi = t.column_means();
        if let Some(kk) = pi.iter().position(|&p| p < degenerate_floor) {
            return Err(Error::DegenerateComponent { component: kk, mass: pi[kk] });
        }
        let cont = self.update_cont(&t, &pi);
        let cat_pmfs = self.update_cat(&t);

        let Some(loss) = self.loss else {
            // Proxy-marginal fit: the minorization is exactly solved, no
            // guard needed.
            let (lnum, loglik) = self.evaluate(&pi, &cont, &cat_pmfs, None);
            *state = State {
                pi,
                coeffs: state.coeffs.clone(),
                cont,
                cat_pmfs,
                noise: None,
                lnum,
                loglik,
            };
            return Ok(0);
        };

        let candidate = weighted_loss_fit(self.data, &t, &loss, &state.coeffs)?.coeffs;
        let previous = state.coeffs.clone();
        let before = state.loglik;
        let mut damped = 0usize;
        for &step in &[1.0, 0.5, 0.25, 0.125, 0.0] {
            let coeffs = blend(&previous, &candidate, step);
            let noise = self.update_noise(&t, &coeffs)?;
            let (lnum, loglik) = self.evaluate(&pi, &cont, &cat_pmfs, Some(&noise));
            let acceptable =
                loglik >= before - MONOTONICITY_SLACK * (1.0 + before.abs()) || step == 0.0;
            if acceptable {
                *state = State { pi, coeffs, cont, cat_pmfs, noise: Some(noise), lnum, loglik };
                return Ok(damped);
            }
            damped += 1;
        }
        unreachable!("the zero step is always accepted");
    }
}

fn blend(a: &RegressionCoefficients, b: &RegressionCoefficients, s: f64) -> RegressionCoefficients {
    if s == 1.0 {
        return b.clone();
    }
    if s == 0.0 {
        return a.clone();
    }
    RegressionCoefficients {
        gamma: a.gamma.iter().zip(&b.gamma).map(|(x, y)| x + s * (y - x)).collect(),
        delta: a.delta.iter().zip(&b.delta).map(|(x, y)| x + s * (y - x)).collect(),
    }
}

struct MmRun {
    state: State,
    trajectory: Vec<f64>,
    diagnostics: Diagnostics,
}

fn mm_single_run(engine: &Engine<'_>, t0: &Responsibilities, settings: &MmSettings) -> Result<MmRun> {
    let degenerate_floor = 1.0 / (10.0 * engine.k as f64);
    let mut state = engine.init_state(t0)?;
    let mut trajectory = vec![state.loglik];
    let mut diagnostics = Diagnostics::new();
    for iter in 0..settings.max_iter {
        diagnostics.iterations = iter + 1;
        let before = state.loglik;
        diagnostics.damped_steps += engine.iterate(&mut state, degenerate_floor)?;
        trajectory.push(state.loglik);
        let change = state.loglik - before;
        if change.abs() <= settings.rel_tol * state.loglik.abs() || change.abs() <= 1e-9 {
            diagnostics.converged = true;
            break;
        }
    }
    Ok(MmRun { state, trajectory, diagnostics })
}

/// Proxy-marginal semi-parametric mixture (the clustering half of the model).
#[derive(Debug, Clone)]
pub struct XMarginalModel {
    pub pi: Vec<f64>,
    pub component_densities: Vec<Vec<UnivariateDensityRep>>,
    pub bandwidth: f64,
}

impl XMarginalModel {
    pub fn apply_permutation(&mut self, perm: &[usize]) {
        self.pi = perm.iter().map(|&p| self.pi[p]).collect();
        self.component_densities =
            perm.iter().map(|&p| self.component_densities[p].clone()).collect();
    }
}

/// Output of the proxy-only smoothed-likelihood fit.
#[derive(Debug, Clone)]
pub struct XOnlyMmFit {
    pub model: XMarginalModel,
    pub responsibilities: Responsibilities,
    pub trajectory: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Builds density representations from final responsibilities.
fn density_reps(
    engine: &Engine<'_>,
    t: &Responsibilities,
    pi: &[f64],
) -> Vec<Vec<UnivariateDensityRep>> {
    let n = engine.n();
    let d_x = engine.data.d_x();
    let mut reps = vec![Vec::with_capacity(d_x); engine.k];
    let cat_pmfs = engine.update_cat(t);
    for (kk, row) in reps.iter_mut().enumerate() {
        let norm = 1.0 / (n as f64 * pi[kk]);
        for j in 0..d_x {
            if let Some(pos) = engine.cont.iter().position(|c| c.column == j) {
                let dim = &engine.cont[pos];
                let weights: Vec<f64> = (0..n).map(|i| t.get(i, kk) * norm).collect();
                let kde = ContinuousKde::new(dim.values.to_vec(), weights, engine.h)
                    .expect("weights normalized by construction");
                row.push(UnivariateDensityRep::Continuous(kde));
            } else {
                let pos = engine.cat.iter().position(|c| c.0 == j).expect("column exists");
                row.push(UnivariateDensityRep::Categorical(cat_pmfs[pos][kk].clone()));
            }
        }
    }
    reps
}

fn assemble_model(engine: &Engine<'_>, state: &State, t: &Responsibilities) -> SemiParamModel {
    let component_densities = density_reps(engine, t, &state.pi);
    let noise_state = state.noise.as_ref().expect("regression fit has a noise side");
    let n = engine.n() as f64;
    let weights: Vec<f64> = (0..engine.n())
        .flat_map(|i| (0..engine.k).map(move |kk| (i, kk)))
        .map(|(i, kk)| t.get(i, kk) / n)
        .collect();
    let noise_density = ContinuousKde::new(noise_state.residuals.clone(), weights, engine.h)
        .expect("weights normalized by construction");
    let mut component_tables = Vec::with_capacity(engine.k);
    for kk in 0..engine.k {
        let mut row: Vec<Option<LogDensityTable>> = vec![None; engine.data.d_x()];
        for (pos, dim) in engine.cont.iter().enumerate() {
            row[dim.column] = Some(LogDensityTable {
                grid: dim.grid.clone(),
                ln_values: state.cont[pos].ln_tables[kk].clone(),
            });
        }
        component_tables.push(row);
    }
    let noise_table = LogDensityTable {
        grid: noise_state.grid.clone(),
        ln_values: noise_state.ln_table.clone(),
    };
    SemiParamModel {
        pi: state.pi.clone(),
        coeffs: state.coeffs.clone(),
        component_densities,
        noise_density,
        bandwidth: engine.h,
        component_tables,
        noise_table,
    }
}

/// Fits the semi-parametric joint model. Start 0 warm-starts from the
/// proxy-only fit (the two-step clustering); remaining starts are random.
pub fn mm_fit(data: &Dataset, k: usize, loss: &LossSpec, settings: &MmSettings) -> Result<FitResult> {
    loss.validate()?;
    let warm = fit_x_only_mm(data, k, settings)?;
    let mut starts = vec![warm.responsibilities];
    for s in 1..settings.n_starts.max(1) {
        let mut rng = crate::init::start_rng(settings.seed, 2000 + s as u64);
        starts.push(crate::init::random_responsibilities(data.n(), k, &mut rng));
    }
    mm_fit_from_starts(data, k, loss, settings, &starts)
}

/// Fits from one caller-supplied responsibility start.
pub fn mm_fit_from(
    data: &Dataset,
    k: usize,
    loss: &LossSpec,
    settings: &MmSettings,
    t0: Responsibilities,
) -> Result<FitResult> {
    if t0.k() != k {
        return Err(Error::LengthMismatch { expected: k, got: t0.k() });
    }
    mm_fit_from_starts(data, k, loss, settings, &[t0])
}

fn mm_fit_from_starts(
    data: &Dataset,
    k: usize,
    loss: &LossSpec,
    settings: &MmSettings,
    starts: &[Responsibilities],
) -> Result<FitResult> {
    if data.continuous_x_dims().len() + 1 < 3 {
        // Identifiability needs at least three independent density
        // dimensions; proceed anyway (small fixtures, K = 1).
    }
    let h = select_bandwidth(data.n(), &settings.kernel)?;
    let engine = Engine::new(data, k, Some(*loss), h)?;
    let mut best: Option<MmRun> = None;
    let mut restarts = 0usize;
    let mut last_err: Option<Error> = None;
    for (s, t0) in starts.iter().enumerate() {
        let mut attempt = mm_single_run(&engine, t0, settings);
        let mut retries = 0;
        while matches!(attempt, Err(Error::DegenerateComponent { .. })) && retries < 3 {
            restarts += 1;
            retries += 1;
            let mut rng =
                crate::init::start_rng(settings.seed, 3000 + (s * 4 + retries) as u64);
            let t_retry = crate::init::random_responsibilities(data.n(), k, &mut rng);
            attempt = mm_single_run(&engine, &t_retry, settings);
        }
        match attempt {
            Ok(run) => {
                let better = best
                    .as_ref()
                    .map(|b| run.state.loglik > b.state.loglik)
                    .unwrap_or(true);
                if better {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let mut run = match best {
        Some(run) => run,
        None => return Err(last_err.unwrap_or_else(|| Error::invalid("no start succeeded"))),
    };
    run.diagnostics.restarts = restarts;
    let t = engine.responsibilities(&run.state.lnum);
    let model = assemble_model(&engine, &run.state, &t);
    Ok(FitResult {
        method: FitMethod::SimultaneousSemiParametric,
        loss: *loss,
        pi: run.state.pi.clone(),
        coeffs: run.state.coeffs.clone(),
        responsibilities: t,
        trajectory: run.trajectory,
        objective: run.state.loglik,
        diagnostics: run.diagnostics,
        details: FitDetails::SemiParametric(model),
    })
}

/// Smoothed-likelihood mixture fit on the proxy block alone (no regression),
/// used as the two-step clustering and as the warm start of [`mm_fit`].
pub fn fit_x_only_mm(data: &Dataset, k: usize, settings: &MmSettings) -> Result<XOnlyMmFit> {
    let h = select_bandwidth(data.n(), &settings.kernel)?;
    let engine = Engine::new(data, k, None, h)?;
    let starts = standard_starts(data, k, settings.n_starts, settings.seed);
    let mut best: Option<MmRun> = None;
    let mut restarts = 0usize;
    let mut last_err: Option<Error> = None;
    for (s, t0) in starts.iter().enumerate() {
        let mut attempt = mm_single_run(&engine, t0, settings);
        let mut retries = 0;
        while matches!(attempt, Err(Error::DegenerateComponent { .. })) && retries < 3 {
            restarts += 1;
            retries += 1;
            let mut rng =
                crate::init::start_rng(settings.seed, 4000 + (s * 4 + retries) as u64);
            let t_retry = crate::init::random_responsibilities(data.n(), k, &mut rng);
            attempt = mm_single_run(&engine, &t_retry, settings);
        }
        match attempt {
            Ok(run) => {
                let better = best
                    .as_ref()
                    .map(|b| run.state.loglik > b.state.loglik)
                    .unwrap_or(true);
                if better {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let mut run = match best {
        Some(run) => run,
        None => return Err(last_err.unwrap_or_else(|| Error::invalid("no start succeeded"))),
    };
    run.diagnostics.restarts = restarts;
    let t = engine.responsibilities(&run.state.lnum);
    let component_densities = density_reps(&engine, &t, &run.state.pi);
    Ok(XOnlyMmFit {
        model: XMarginalModel {
            pi: run.state.pi.clone(),
            component_densities,
            bandwidth: h,
        },
        responsibilities: t,
        trajectory: run.trajectory,
        diagnostics: run.diagnostics,
    })
}

/// One row of the class-count selection table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSelectionRow {
    pub k: usize,
    pub smoothed_loglik: Option<f64>,
    pub cv_prediction_mse: Option<f64>,
    pub error: Option<String>,
}

/// Fits each class count and reports the smoothed log-likelihood plus a
/// seeded 5-fold cross-validated prediction MSE. Selection is left to the
/// caller; failures are recorded per row rather than aborting the table.
pub fn select_k(
    data: &Dataset,
    k_range: &[usize],
    loss: &LossSpec,
    settings: &MmSettings,
) -> Vec<KSelectionRow> {
    const FOLDS: usize = 5;
    k_range
        .iter()
        .map(|&k| {
            let full = mm_fit(data, k, loss, settings);
            let (loglik, mut error) = match &full {
                Ok(fit) => (Some(fit.objective), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let mut cv = None;
            if error.is_none() {
                let mut sq_errors = Vec::new();
                let mut cv_err = None;
                for fold in 0..FOLDS {
                    let (train_idx, test_idx) = fold_split(data.n(), FOLDS, fold, settings.seed);
                    let train = data.subset(&train_idx);
                    match mm_fit(&train, k, loss, settings) {
                        Ok(fit) => {
                            let model = match &fit.details {
                                FitDetails::SemiParametric(m) => m,
                                _ => unreachable!(),
                            };
                            for &i in &test_idx {
                                let u = data.u_row(i);
                                let x = data.x_row(i);
                                match model.predict(&u, &x, loss) {
                                    Ok(yhat) => {
                                        sq_errors.push((data.y()[i] - yhat).powi(2));
                                    }
                                    Err(e) => cv_err = Some(e.to_string()),
                                }
                            }
                        }
                        Err(e) => cv_err = Some(e.to_string()),
                    }
                }
                if let Some(e) = cv_err {
                    error = Some(e);
                } else if !sq_errors.is_empty() {
                    cv = Some(sq_errors.iter().sum::<f64>() / sq_errors.len() as f64);
                }
            }
            KSelectionRow { k, smoothed_loglik: loglik, cv_prediction_mse: cv, error }
        })
        .collect()
}

/// Seeded shuffled split into train/test for one fold.
fn fold_split(n: usize, folds: usize, fold: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5f0ld as u64);
    idx.shuffle(&mut rng);
    let test: Vec<usize> =
        idx.iter().enumerate().filter(|(pos, _)| pos % folds == fold).map(|(_, &i)| i).collect();
    let train: Vec<usize> =
        idx.iter().enumerate().filter(|(pos, _)| pos % folds != fold).map(|(_, &i)| i).collect();
    (train, test)
}
