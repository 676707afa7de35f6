//! Gaussian-process regression with a squared-exponential ARD kernel.
//!
//! Inputs and outputs are standardized before training; the mean function is
//! zero in standardized units. Hyperparameters are fit by minimizing the
//! negative log marginal likelihood with multi-start L-BFGS on bounded
//! log-parameters. The posterior is noise-free up to a small relative jitter,
//! so predictions interpolate the training data.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("training set needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("inconsistent dimensions: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance matrix not positive definite even with jitter {0:e}")]
    Conditioning(f64),
}

/// When a surrogate that receives appended points re-optimizes its
/// hyperparameters. Appends between refits only extend the factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefitSchedule {
    /// Refit interval while the archive holds at most `large_archive` points.
    pub every: usize,
    pub large_archive: usize,
    /// Refit interval beyond `large_archive` points.
    pub every_large: usize,
    /// Beyond `large_archive`, also wait for the archive to grow by this
    /// fraction of its size.
    pub growth: f64,
}

impl Default for RefitSchedule {
    fn default() -> Self {
        Self { every: 1, large_archive: 200, every_large: 10, growth: 0.0 }
    }
}

impl RefitSchedule {
    pub fn interval(&self, archive_len: usize) -> usize {
        let k = if archive_len <= self.large_archive {
            self.every
        } else {
            self.every_large.max((self.growth * archive_len as f64).ceil() as usize)
        };
        k.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    /// Number of optimizer starts on a fresh fit (unit values plus log-uniform draws).
    pub n_starts: usize,
    /// Starts on a scheduled refit: the current optimum, then the unit point.
    pub refit_starts: usize,
    pub max_iters: u64,
    /// Iteration cap per start on a scheduled refit.
    pub refit_max_iters: u64,
    /// Range of the log-uniform start draws.
    pub start_range: (f64, f64),
    /// Isotropic lengthscales in [0.03, 3] screened by NLL before every
    /// optimization; the best one is added as a start. Zero disables.
    pub screen_points: usize,
    /// Hard bounds on the standardized signal variance.
    pub signal_variance_bounds: (f64, f64),
    /// Hard bounds on the standardized lengthscales.
    pub lengthscale_bounds: (f64, f64),
    /// Relative diagonal jitter tried first, then escalated ×10 up to `max_jitter`.
    pub initial_jitter: f64,
    pub max_jitter: f64,
    pub refit: RefitSchedule,
    pub seed: u64,
    /// Subtract the output mean before training. When false the prior mean
    /// is zero in raw output units and outputs are only rescaled.
    pub center_outputs: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            n_starts: 8,
            refit_starts: 2,
            max_iters: 200,
            refit_max_iters: 200,
            start_range: (1e-2, 1e2),
            screen_points: 9,
            signal_variance_bounds: (1e-6, 1e4),
            lengthscale_bounds: (1e-3, 1e3),
            initial_jitter: 1e-8,
            max_jitter: 1e-4,
            refit: RefitSchedule::default(),
            seed: 0x5eed,
            center_outputs: true,
        }
    }
}

/// Kernel hyperparameters in standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparameters {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    /// Relative jitter: the diagonal receives `jitter * signal_variance`.
    pub jitter: f64,
}

impl KernelHyperparameters {
    pub fn unit(dim: usize, jitter: f64) -> Self {
        Self { signal_variance: 1.0, lengthscales: vec![1.0; dim], jitter }
    }

    fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.lengthscales.iter().map(|l| l.ln()))
            .collect()
    }

    fn from_log_params(theta: &[f64], jitter: f64) -> Self {
        Self {
            signal_variance: theta[0].exp(),
            lengthscales: theta[1..].iter().map(|t| t.exp()).collect(),
            jitter,
        }
    }
}

/// Per-dimension affine standardization `z = (x - mean) / scale`.
///
/// A zero scale marks a constant column: standardized values are 0 and
/// unstandardizing multiplies by 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    fn fit(rows: &[Vec<f64>], dim: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = s.sqrt();
            if *s < 1e-300 {
                *s = 0.0;
            }
        }
        Self { mean, scale }
    }

    fn fit_outputs(outputs: &[f64], center: bool) -> Self {
        if center {
            return Self::fit(&outputs.iter().map(|&y| vec![y]).collect::<Vec<_>>(), 1);
        }
        let rms = (outputs.iter().map(|y| y * y).sum::<f64>() / outputs.len() as f64).sqrt();
        Self { mean: vec![0.0], scale: vec![if rms < 1e-300 { 0.0 } else { rms }] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

/// Lower-triangular factor stored as packed rows (row `i` has `i + 1` entries).
#[derive(Debug, Clone, Default)]
struct Cholesky {
    rows: Vec<Vec<f64>>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix given by its packed lower rows.
    fn factor(mut rows: Vec<Vec<f64>>) -> Option<Self> {
        let n = rows.len();
        for i in 0..n {
            let (head, tail) = rows.split_at_mut(i);
            let ri = &mut tail[0];
            for (j, rj) in head.iter().enumerate() {
                let s = dot(&ri[..j], &rj[..j]);
                ri[j] = (ri[j] - s) / rj[j];
            }
            let d = ri[i] - dot(&ri[..i], &ri[..i]);
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            ri[i] = d.sqrt();
        }
        Some(Self { rows })
    }

    /// Solves `L v = b`.
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s = dot(&row[..i], &v);
            v.push((b[i] - s) / row[i]);
        }
        v
    }

    /// Solves `Lᵀ x = y` in place.
    fn backward(&self, y: &mut [f64]) {
        for k in (0..self.rows.len()).rev() {
            let row = &self.rows[k];
            y[k] /= row[k];
            let xk = y[k];
            for (yi, lki) in y[..k].iter_mut().zip(&row[..k]) {
                *yi -= lki * xk;
            }
        }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut v = self.forward(b);
        self.backward(&mut v);
        v
    }

    /// Appends a row given the new column of the kernel matrix (off-diagonal
    /// part `k`, diagonal `kdiag`). Returns false when the update loses
    /// positive definiteness.
    fn append(&mut self, k: &[f64], kdiag: f64) -> bool {
        let mut row = self.forward(k);
        let d = kdiag - dot(&row, &row);
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        row.push(d.sqrt());
        self.rows.push(row);
        true
    }

    fn log_det(&self) -> f64 {
        2.0 * self.rows.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist_scaled(a: &[f64], b: &[f64], inv_l2: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv_l2)
        .map(|((x, y), w)| (x - y) * (x - y) * w)
        .sum()
}

/// Packed lower rows of the regularized kernel matrix.
fn kernel_rows(z: &[Vec<f64>], hyper: &KernelHyperparameters) -> Vec<Vec<f64>> {
    let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let s2 = hyper.signal_variance;
    z.iter()
        .enumerate()
        .map(|(i, zi)| {
            let mut row: Vec<f64> = z[..i]
                .iter()
                .map(|zj| s2 * (-0.5 * sq_dist_scaled(zi, zj, &inv_l2)).exp())
                .collect();
            row.push(s2 * (1.0 + hyper.jitter));
            row
        })
        .collect()
}

const REFINEMENT_STEPS: usize = 3;

/// Weights `α` of the noise-free interpolant. The jittered factor is used as a
/// preconditioner for a few refinement sweeps against the un-jittered kernel,
/// which removes most of the jitter-induced residual at the training points.
fn interpolating_weights(
    z: &[Vec<f64>],
    hyper: &KernelHyperparameters,
    chol: &Cholesky,
    y: &[f64],
) -> Vec<f64> {
    let mut alpha = chol.solve(y);
    let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let s2 = hyper.signal_variance;
    let n = z.len();
    for _ in 0..REFINEMENT_STEPS {
        let mut r = y.to_vec();
        for i in 0..n {
            r[i] -= s2 * alpha[i];
            for j in 0..i {
                let k = s2 * (-0.5 * sq_dist_scaled(&z[i], &z[j], &inv_l2)).exp();
                r[i] -= k * alpha[j];
                r[j] -= k * alpha[i];
            }
        }
        let delta = chol.solve(&r);
        for (a, d) in alpha.iter_mut().zip(&delta) {
            *a += d;
        }
    }
    alpha
}

/// Factorizes with jitter escalation; returns the factor and the jitter used.
fn factor_with_jitter(
    z: &[Vec<f64>],
    hyper: &KernelHyperparameters,
    max_jitter: f64,
) -> Option<(Cholesky, f64)> {
    let mut h = hyper.clone();
    loop {
        if let Some(c) = Cholesky::factor(kernel_rows(z, &h)) {
            return Some((c, h.jitter));
        }
        if h.jitter >= max_jitter {
            return None;
        }
        h.jitter = (h.jitter * 10.0).min(max_jitter);
    }
}

/// Negative log marginal likelihood in standardized units and its gradient
/// with respect to `(ln σ², ln λ₁, …, ln λ_d)`.
///
/// The jitter is escalated from `initial_jitter` as needed; `None` when no
/// admissible jitter yields a factorization.
pub fn nll_and_gradient(
    z: &[Vec<f64>],
    y: &[f64],
    log_params: &[f64],
    initial_jitter: f64,
    max_jitter: f64,
) -> Option<(f64, Vec<f64>)> {
    let n = z.len();
    let hyper = KernelHyperparameters::from_log_params(log_params, initial_jitter);
    let d = hyper.lengthscales.len();
    let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let s2 = hyper.signal_variance;
    let mut kernel = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in j + 1..n {
            let k = s2 * (-0.5 * sq_dist_scaled(&z[i], &z[j], &inv_l2)).exp();
            kernel[(i, j)] = k;
            kernel[(j, i)] = k;
        }
    }
    let mut jitter = initial_jitter;
    let llt = loop {
        for i in 0..n {
            kernel[(i, i)] = s2 * (1.0 + jitter);
        }
        if let Ok(llt) = kernel.as_ref().llt(Side::Lower) {
            break llt;
        }
        if jitter >= max_jitter {
            return None;
        }
        jitter = (jitter * 10.0).min(max_jitter);
    };
    let y_col = Mat::<f64>::from_fn(n, 1, |i, _| y[i]);
    let alpha_col = llt.solve(&y_col);
    let alpha: Vec<f64> = (0..n).map(|i| alpha_col[(i, 0)]).collect();
    let l = llt.L();
    let log_det: f64 = (0..n).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let nll = 0.5 * dot(y, &alpha) + 0.5 * log_det + 0.5 * n as f64 * (2.0 * PI).ln();

    let inv = llt.inverse();
    let mut grad = vec![0.0; d + 1];
    for j in 0..n {
        // Diagonal: dK/dlnσ² = σ²(1 + jitter); lengthscale terms vanish.
        let w_jj = inv[(j, j)] - alpha[j] * alpha[j];
        grad[0] += 0.5 * w_jj * s2 * (1.0 + jitter);
        for i in j + 1..n {
            let w = inv[(i, j)] - alpha[i] * alpha[j];
            let kij = kernel[(i, j)];
            // Off-diagonal pairs appear twice in the trace.
            grad[0] += w * kij;
            for k in 0..d {
                let diff = z[i][k] - z[j][k];
                grad[k + 1] += w * kij * diff * diff * inv_l2[k];
            }
        }
    }
    Some((nll, grad))
}

/// Bounded reparametrization `θ = lo + (hi − lo)·sigmoid(u)` of each
/// log-hyperparameter, so the optimizer runs unconstrained.
struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn new(dim: usize, cfg: &GpConfig) -> Self {
        let (sl, sh) = cfg.signal_variance_bounds;
        let (ll, lh) = cfg.lengthscale_bounds;
        let mut lo = vec![sl.ln()];
        let mut hi = vec![sh.ln()];
        lo.extend(std::iter::repeat_n(ll.ln(), dim));
        hi.extend(std::iter::repeat_n(lh.ln(), dim));
        Self { lo, hi }
    }

    fn to_theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| self.lo[i] + (self.hi[i] - self.lo[i]) / (1.0 + (-ui).exp()))
            .collect()
    }

    fn dtheta_du(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| {
                let s = 1.0 / (1.0 + (-ui).exp());
                (self.hi[i] - self.lo[i]) * s * (1.0 - s)
            })
            .collect()
    }

    fn to_u(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let eps = 1e-9;
                let p = ((t - self.lo[i]) / (self.hi[i] - self.lo[i])).clamp(eps, 1.0 - eps);
                (p / (1.0 - p)).ln()
            })
            .collect()
    }
}

struct NllProblem<'a> {
    z: &'a [Vec<f64>],
    y: &'a [f64],
    bounds: &'a Bounds,
    initial_jitter: f64,
    max_jitter: f64,
    cache: RefCell<Option<(Vec<f64>, Option<(f64, Vec<f64>)>)>>,
    best: &'a RefCell<(f64, Vec<f64>)>,
}

impl NllProblem<'_> {
    fn eval(&self, u: &[f64]) -> Option<(f64, Vec<f64>)> {
        if let Some((cu, cv)) = self.cache.borrow().as_ref() {
            if cu.as_slice() == u {
                return cv.clone();
            }
        }
        let theta = self.bounds.to_theta(u);
        let out = nll_and_gradient(self.z, self.y, &theta, self.initial_jitter, self.max_jitter)
            .filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite()))
            .map(|(v, g)| {
                let jac = self.bounds.dtheta_du(u);
                (v, g.iter().zip(&jac).map(|(a, b)| a * b).collect::<Vec<_>>())
            });
        if let Some((v, _)) = &out {
            let mut best = self.best.borrow_mut();
            if *v < best.0 {
                *best = (*v, theta);
            }
        }
        *self.cache.borrow_mut() = Some((u.to_vec(), out.clone()));
        out
    }
}

impl CostFunction for NllProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> Result<f64, argmin::core::Error> {
        self.eval(u)
            .map(|(v, _)| v)
            .ok_or_else(|| argmin::core::Error::msg("covariance not factorizable"))
    }
}

impl Gradient for NllProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, u: &Self::Param) -> Result<Vec<f64>, argmin::core::Error> {
        self.eval(u)
            .map(|(_, g)| g)
            .ok_or_else(|| argmin::core::Error::msg("covariance not factorizable"))
    }
}

/// Best unit-variance isotropic start on a log-spaced lengthscale grid.
fn screen_isotropic(z: &[Vec<f64>], y: &[f64], cfg: &GpConfig) -> Option<Vec<f64>> {
    let k = cfg.screen_points;
    let dim = z.first().map_or(0, |r| r.len());
    let (lo, hi) = (0.03f64.ln(), 3.0f64.ln());
    (0..k)
        .filter_map(|i| {
            let t = if k == 1 { 0.0 } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 };
            let theta: Vec<f64> = std::iter::once(0.0).chain(std::iter::repeat_n(t, dim)).collect();
            let (v, _) = nll_and_gradient(z, y, &theta, cfg.initial_jitter, cfg.max_jitter)?;
            v.is_finite().then_some((theta, v))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(theta, _)| theta)
}

/// Minimizes the NLL from each start; returns the best log-parameters seen
/// (starting points included) and its NLL.
fn optimize(
    z: &[Vec<f64>],
    y: &[f64],
    starts: &[Vec<f64>],
    cfg: &GpConfig,
    max_iters: u64,
) -> Option<(Vec<f64>, f64)> {
    let dim = z.first().map_or(0, |r| r.len());
    let bounds = Bounds::new(dim, cfg);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let best_seen = RefCell::new((f64::INFINITY, Vec::new()));
        let problem = NllProblem {
            z,
            y,
            bounds: &bounds,
            initial_jitter: cfg.initial_jitter,
            max_jitter: cfg.max_jitter,
            cache: RefCell::new(None),
            best: &best_seen,
        };
        let u0 = bounds.to_u(start);
        // Score the start itself even if the solver bails out immediately.
        let _ = problem.eval(&u0);
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
            .with_tolerance_grad(1e-7)
            .and_then(|s| s.with_tolerance_cost(1e-12));
        if let Ok(solver) = solver {
            let _ = Executor::new(problem, solver)
                .configure(|state| state.param(u0).max_iters(max_iters))
                .run();
        }
        let (v, theta) = best_seen.into_inner();
        if v.is_finite() && best.as_ref().is_none_or(|(_, bv)| v < *bv) {
            best = Some((theta, v));
        }
    }
    best
}

/// A trained Gaussian-process surrogate.
#[derive(Debug)]
pub struct GaussianProcess {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    z_inputs: Vec<Vec<f64>>,
    z_outputs: Vec<f64>,
    hyper: KernelHyperparameters,
    chol: Cholesky,
    alpha: Vec<f64>,
    input_scaler: Scaler,
    output_scaler: Scaler,
    config: GpConfig,
    appends_since_refit: usize,
    pending_first_refit: bool,
    negative_variance: AtomicU64,
}

impl Clone for GaussianProcess {
    fn clone(&self) -> Self {
        Self {
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            z_inputs: self.z_inputs.clone(),
            z_outputs: self.z_outputs.clone(),
            hyper: self.hyper.clone(),
            chol: self.chol.clone(),
            alpha: self.alpha.clone(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            config: self.config.clone(),
            appends_since_refit: self.appends_since_refit,
            pending_first_refit: self.pending_first_refit,
            negative_variance: AtomicU64::new(self.negative_variance.load(Ordering::Relaxed)),
        }
    }
}

/// JSON form of a surrogate: enough to rebuild it without re-optimizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpArchive {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub hyperparameters: KernelHyperparameters,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
    pub config: GpConfig,
    #[serde(default)]
    pub appends_since_refit: usize,
}

fn validate(inputs: &[Vec<f64>], outputs: &[f64]) -> Result<usize, GpError> {
    if inputs.len() != outputs.len() {
        return Err(GpError::Dimension { expected: inputs.len(), got: outputs.len() });
    }
    if inputs.len() < 2 {
        return Err(GpError::TooFewPoints(inputs.len()));
    }
    let d = inputs[0].len();
    for r in inputs {
        if r.len() != d {
            return Err(GpError::Dimension { expected: d, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    Ok(d)
}

const DUPLICATE_TOL: f64 = 1e-12;

/// Drops earlier rows that coincide (after standardization) with a later one.
fn dedup_keep_latest(
    inputs: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    z: Vec<Vec<f64>>,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let n = inputs.len();
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            !(i + 1..n).any(|j| {
                z[i].iter().zip(&z[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                    < DUPLICATE_TOL
            })
        })
        .collect();
    let mut xi = Vec::new();
    let mut yo = Vec::new();
    let mut zz = Vec::new();
    for (((x, y), zr), k) in inputs.into_iter().zip(outputs).zip(z).zip(keep) {
        if k {
            xi.push(x);
            yo.push(y);
            zz.push(zr);
        }
    }
    (xi, yo, zz)
}

impl GaussianProcess {
    /// Fits hyperparameters from scratch with the configured multi-start.
    pub fn fit(inputs: Vec<Vec<f64>>, outputs: Vec<f64>, config: GpConfig) -> Result<Self, GpError> {
        let d = validate(&inputs, &outputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (a, b) = (config.start_range.0.ln(), config.start_range.1.ln());
        let mut starts = vec![vec![0.0; d + 1]];
        for _ in 1..config.n_starts.max(1) {
            starts.push((0..=d).map(|_| rng.random_range(a..b)).collect());
        }
        let iters = config.max_iters;
        Self::train(inputs, outputs, config, &starts, iters)
    }

    /// Builds a surrogate with fixed hyperparameters (no optimization).
    pub fn with_hyperparameters(
        inputs: Vec<Vec<f64>>,
        outputs: Vec<f64>,
        hyper: KernelHyperparameters,
        config: GpConfig,
    ) -> Result<Self, GpError> {
        let d = validate(&inputs, &outputs)?;
        if hyper.lengthscales.len() != d {
            return Err(GpError::Dimension { expected: d, got: hyper.lengthscales.len() });
        }
        let input_scaler = Scaler::fit(&inputs, d);
        let output_scaler = Scaler::fit_outputs(&outputs, config.center_outputs);
        Self::assemble(inputs, outputs, input_scaler, output_scaler, hyper, config)
    }

    fn train(
        inputs: Vec<Vec<f64>>,
        outputs: Vec<f64>,
        config: GpConfig,
        starts: &[Vec<f64>],
        max_iters: u64,
    ) -> Result<Self, GpError> {
        let d = inputs[0].len();
        let input_scaler = Scaler::fit(&inputs, d);
        let output_scaler = Scaler::fit_outputs(&outputs, config.center_outputs);
        let z: Vec<Vec<f64>> = inputs.iter().map(|x| input_scaler.apply(x)).collect();
        let (inputs, outputs, z) = dedup_keep_latest(inputs, outputs, z);
        let zy: Vec<f64> = outputs.iter().map(|&y| output_scaler.apply(&[y])[0]).collect();
        let mut starts = starts.to_vec();
        if let Some(screened) = screen_isotropic(&z, &zy, &config) {
            if !starts.contains(&screened) {
                starts.push(screened);
            }
        }
        let (theta, _) =
            optimize(&z, &zy, &starts, &config, max_iters).ok_or(GpError::Conditioning(config.max_jitter))?;
        let hyper = KernelHyperparameters::from_log_params(&theta, config.initial_jitter);
        Self::assemble(inputs, outputs, input_scaler, output_scaler, hyper, config)
    }

    fn assemble(
        inputs: Vec<Vec<f64>>,
        outputs: Vec<f64>,
        input_scaler: Scaler,
        output_scaler: Scaler,
        hyper: KernelHyperparameters,
        config: GpConfig,
    ) -> Result<Self, GpError> {
        let z: Vec<Vec<f64>> = inputs.iter().map(|x| input_scaler.apply(x)).collect();
        let (inputs, outputs, z_inputs) = dedup_keep_latest(inputs, outputs, z);
        let z_outputs: Vec<f64> = outputs.iter().map(|&y| output_scaler.apply(&[y])[0]).collect();
        let (chol, jitter) = factor_with_jitter(&z_inputs, &hyper, config.max_jitter)
            .ok_or(GpError::Conditioning(config.max_jitter))?;
        let hyper = KernelHyperparameters { jitter, ..hyper };
        let alpha = interpolating_weights(&z_inputs, &hyper, &chol, &z_outputs);
        Ok(Self {
            inputs,
            outputs,
            z_inputs,
            z_outputs,
            hyper,
            chol,
            alpha,
            input_scaler,
            output_scaler,
            config,
            appends_since_refit: 0,
            pending_first_refit: true,
            negative_variance: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.input_scaler.mean.len()
    }

    pub fn hyperparameters(&self) -> &KernelHyperparameters {
        &self.hyper
    }

    pub fn config(&self) -> &GpConfig {
        &self.config
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Count of predictions whose variance came out negative and was clamped.
    pub fn negative_variance_count(&self) -> u64 {
        self.negative_variance.load(Ordering::Relaxed)
    }

    /// NLL of the current hyperparameters on the current (standardized) archive.
    pub fn nll(&self) -> f64 {
        let n = self.z_outputs.len() as f64;
        let alpha = self.chol.solve(&self.z_outputs);
        0.5 * dot(&self.z_outputs, &alpha)
            + 0.5 * self.chol.log_det()
            + 0.5 * n * (2.0 * PI).ln()
    }

    /// `L Lᵀ` reconstructed from the cached factor, as packed lower rows.
    pub fn reconstructed_kernel(&self) -> Vec<Vec<f64>> {
        let r = &self.chol.rows;
        (0..r.len()).map(|i| (0..=i).map(|j| dot(&r[i][..=j], &r[j][..=j])).collect()).collect()
    }

    /// Packed lower rows of the regularized kernel on the current archive.
    pub fn kernel_matrix(&self) -> Vec<Vec<f64>> {
        kernel_rows(&self.z_inputs, &self.hyper)
    }

    /// Posterior mean and standard deviation in original output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let z = self.input_scaler.apply(x);
        let inv_l2: Vec<f64> = self.hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let s2 = self.hyper.signal_variance;
        let k: Vec<f64> = self
            .z_inputs
            .iter()
            .map(|zi| s2 * (-0.5 * sq_dist_scaled(&z, zi, &inv_l2)).exp())
            .collect();
        let mean_z = dot(&k, &self.alpha);
        let v = self.chol.forward(&k);
        let mut var_z = s2 - dot(&v, &v);
        if var_z < 0.0 {
            self.negative_variance.fetch_add(1, Ordering::Relaxed);
            var_z = 0.0;
        }
        let (ym, ys) = (self.output_scaler.mean[0], self.output_scaler.scale[0]);
        (ym + ys * mean_z, ys * var_z.sqrt())
    }

    /// Predictive mean only.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        let z = self.input_scaler.apply(x);
        let inv_l2: Vec<f64> = self.hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let s2 = self.hyper.signal_variance;
        let m: f64 = self
            .z_inputs
            .iter()
            .zip(&self.alpha)
            .map(|(zi, a)| a * s2 * (-0.5 * sq_dist_scaled(&z, zi, &inv_l2)).exp())
            .sum();
        self.output_scaler.mean[0] + self.output_scaler.scale[0] * m
    }

    /// Appends one observation. Extends the factorization by one row and
    /// re-optimizes hyperparameters when the refit schedule says so (always on
    /// the first append after a fit).
    pub fn update(&mut self, x_new: Vec<f64>, y_new: f64) -> Result<(), GpError> {
        if x_new.len() != self.dim() {
            return Err(GpError::Dimension { expected: self.dim(), got: x_new.len() });
        }
        if !y_new.is_finite() || x_new.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let z_new = self.input_scaler.apply(&x_new);
        let dup = self.z_inputs.iter().position(|zi| {
            zi.iter().zip(&z_new).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < DUPLICATE_TOL
        });

        // Constant outputs cannot absorb a different value without new scalers.
        let scale_frozen = self.output_scaler.scale[0] == 0.0 && y_new != self.output_scaler.mean[0];

        self.appends_since_refit += 1;
        let due = self.pending_first_refit
            || scale_frozen
            || self.appends_since_refit >= self.config.refit.interval(self.inputs.len() + 1);

        if let Some(i) = dup {
            self.inputs.remove(i);
            self.outputs.remove(i);
            self.z_inputs.remove(i);
            self.z_outputs.remove(i);
        }
        self.inputs.push(x_new);
        self.outputs.push(y_new);

        if due {
            return self.refit();
        }

        let zy = self.output_scaler.apply(&[y_new])[0];
        if dup.is_none() {
            let inv_l2: Vec<f64> = self.hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
            let s2 = self.hyper.signal_variance;
            let k: Vec<f64> = self
                .z_inputs
                .iter()
                .map(|zi| s2 * (-0.5 * sq_dist_scaled(&z_new, zi, &inv_l2)).exp())
                .collect();
            let appended = self.chol.append(&k, s2 * (1.0 + self.hyper.jitter));
            self.z_inputs.push(z_new);
            self.z_outputs.push(zy);
            if !appended {
                self.refactor()?;
            }
        } else {
            self.z_inputs.push(z_new);
            self.z_outputs.push(zy);
            self.refactor()?;
        }
        self.alpha = interpolating_weights(&self.z_inputs, &self.hyper, &self.chol, &self.z_outputs);
        Ok(())
    }

    /// Full factorization of the current archive with the current
    /// hyperparameters, escalating jitter if needed.
    fn refactor(&mut self) -> Result<(), GpError> {
        let base = KernelHyperparameters { jitter: self.config.initial_jitter, ..self.hyper.clone() };
        let (chol, jitter) = factor_with_jitter(&self.z_inputs, &base, self.config.max_jitter)
            .ok_or(GpError::Conditioning(self.config.max_jitter))?;
        self.chol = chol;
        self.hyper.jitter = jitter;
        Ok(())
    }

    /// Re-standardizes and re-optimizes from the current optimum (and the
    /// unit point) on the whole archive.
    pub fn refit(&mut self) -> Result<(), GpError> {
        let d = self.dim();
        let mut starts = vec![self.hyper.log_params()];
        if self.config.refit_starts >= 2 {
            starts.push(vec![0.0; d + 1]);
        }
        if self.config.refit_starts > 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            let (a, b) = (self.config.start_range.0.ln(), self.config.start_range.1.ln());
            for _ in 2..self.config.refit_starts {
                starts.push((0..=d).map(|_| rng.random_range(a..b)).collect());
            }
        }
        let inputs = std::mem::take(&mut self.inputs);
        let outputs = std::mem::take(&mut self.outputs);
        let fresh = Self::train(inputs, outputs, self.config.clone(), &starts, self.config.refit_max_iters)?;
        let negatives = self.negative_variance.load(Ordering::Relaxed);
        *self = fresh;
        self.negative_variance.store(negatives, Ordering::Relaxed);
        self.pending_first_refit = false;
        Ok(())
    }

    pub fn to_archive(&self) -> GpArchive {
        GpArchive {
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            hyperparameters: self.hyper.clone(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            config: self.config.clone(),
            appends_since_refit: self.appends_since_refit,
        }
    }

    /// Rebuilds a surrogate from its archive, keeping the stored scalers and
    /// hyperparameters.
    pub fn from_archive(archive: GpArchive) -> Result<Self, GpError> {
        validate(&archive.inputs, &archive.outputs)?;
        let mut gp = Self::assemble(
            archive.inputs,
            archive.outputs,
            archive.input_scaler,
            archive.output_scaler,
            archive.hyperparameters,
            archive.config,
        )?;
        gp.appends_since_refit = archive.appends_since_refit;
        gp.pending_first_refit = false;
        Ok(gp)
    }
}
