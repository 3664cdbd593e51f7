//! Regularized maximum-likelihood estimation for GLM bandits.
//!
//! [`EstimatorState`] owns the observation history and keeps three derived
//! quantities in sync with it:
//!
//! * `V_t = lambda I + sum x x^T`, the vanilla Gram matrix (updated per push),
//! * `theta_hat`, the minimizer of `L_t(theta) + lambda/2 |theta|^2`,
//! * `H_hat = lambda I + sum mu'(x^T theta_hat) x x^T`, the weighted Gram.
//!
//! The linear link uses the ridge closed form `V^{-1} b`. Other links run a
//! damped Newton (IRLS) iteration warm-started from the previous estimate.

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView, DVectorViewMut};
use thiserror::Error;

use crate::glm::{LinkError, LinkKind, LinkSpec};
use crate::linalg::{LinalgError, SpdFactor, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("regularization must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("Newton iteration did not converge after {iterations} steps (gradient norm {grad_norm:e})")]
    NoConvergence { grad_norm: f64, iterations: usize },
    #[error("feature has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

/// Divisor floor for `|theta_hat|` in the perturbation scale.
pub const THETA_NORM_FLOOR: f64 = 1e-6;

/// Append-only list of `(x_tau, r_tau)` pairs, features stored contiguously.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    dim: usize,
    features: Vec<f64>,
    rewards: Vec<f64>,
}

impl History {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            rewards: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, x: &[f64], r: f64) -> Result<(), EstimationError> {
        if x.len() != self.dim {
            return Err(EstimationError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.features.extend_from_slice(x);
        self.rewards.push(r);
        Ok(())
    }

    pub fn feature(&self, tau: usize) -> &[f64] {
        &self.features[tau * self.dim..(tau + 1) * self.dim]
    }

    /// All features, `len() * dim()` values, one row per observation.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.features
            .chunks_exact(self.dim.max(1))
            .zip(self.rewards.iter().copied())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // two chains halve the dependent additions
    let (mut s0, mut s1) = (0.0, 0.0);
    let mut pairs = a.chunks_exact(2).zip(b.chunks_exact(2));
    for (x, y) in &mut pairs {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
    }
    if a.len() % 2 == 1 {
        s0 += a[a.len() - 1] * b[a.len() - 1];
    }
    s0 + s1
}

/// `L_t(theta) = sum_tau g(x^T theta) - r x^T theta`, without the ridge term.
pub fn neg_log_likelihood(link: &LinkSpec, history: &History, theta: &DVector<f64>) -> Result<f64, EstimationError> {
    if theta.len() != history.dim() {
        return Err(EstimationError::DimensionMismatch {
            expected: history.dim(),
            got: theta.len(),
        });
    }
    let mut total = 0.0;
    for (x, r) in history.iter() {
        let z = dot(x, theta.as_slice());
        total += link.checked_log_partition(z)? - r * z;
    }
    Ok(total)
}

/// Stopping rule of the Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Converged once `|grad L + lambda theta| <= grad_tol`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Step halvings tried before giving up on a direction.
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
        }
    }
}

/// Output of [`solve_regularized_mle`].
#[derive(Debug, Clone)]
pub struct MleSolution {
    pub theta: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `sum g(x^T theta) - r x^T theta + lambda/2 |theta|^2` with a
/// step-halving Newton method. `features` holds one row of length `dim` per
/// reward. Non-convergence is reported in the solution, not as an error.
pub fn solve_regularized_mle(
    link: &LinkSpec,
    dim: usize,
    features: &[f64],
    rewards: &[f64],
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    opts: NewtonOptions,
) -> Result<MleSolution, EstimationError> {
    solve_regularized_mle_cached(
        link,
        dim,
        features,
        rewards,
        lambda,
        warm_start,
        opts,
        &mut NewtonCache::new(),
    )
}

/// Sums over the rows at one parameter, without the ridge terms.
#[derive(Debug, Clone, PartialEq)]
struct RowSums {
    /// `sum g - r z` except the logarithmic part of `g`.
    linear: f64,
    /// Logarithmic part of `g`, kept as closed logs plus an open product.
    log: f64,
    product: f64,
    open: usize,
    grad: Vec<f64>,
    /// `mu'(z)` of every row, the Hessian weights.
    weights: Vec<f64>,
}

/// Factors folded into one product before taking its log; each logistic
/// factor lies in `[1, 2]`, so the product stays finite.
const LOG_CHUNK: usize = 512;

impl RowSums {
    fn new(dim: usize) -> Self {
        Self {
            linear: 0.0,
            log: 0.0,
            product: 1.0,
            open: 0,
            grad: vec![0.0; dim],
            weights: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.linear = 0.0;
        self.log = 0.0;
        self.product = 1.0;
        self.open = 0;
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        self.weights.clear();
    }

    /// Adds the rows of `features` evaluated at `theta`.
    fn add_rows(
        &mut self,
        link: &LinkSpec,
        features: &[f64],
        rewards: &[f64],
        theta: &[f64],
    ) -> Result<(), EstimationError> {
        macro_rules! fixed {
            ($($d:literal)*) => {
                match theta.len() {
                    $($d => self.add_rows_fixed::<$d>(link, features, rewards, theta),)*
                    _ => self.add_rows_any(link, features, rewards, theta),
                }
            };
        }
        fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16)
    }

    fn add_row(&mut self, link: &LinkSpec, z: f64, r: f64) -> Result<f64, EstimationError> {
        let (lin, factor, mu, mu_dot) = link.eval(z)?;
        self.linear += lin - r * z;
        self.product *= factor;
        self.open += 1;
        if self.open == LOG_CHUNK {
            self.log += self.product.ln();
            self.product = 1.0;
            self.open = 0;
        }
        self.weights.push(mu_dot);
        Ok(mu - r)
    }

    fn add_rows_fixed<const D: usize>(
        &mut self,
        link: &LinkSpec,
        features: &[f64],
        rewards: &[f64],
        theta: &[f64],
    ) -> Result<(), EstimationError> {
        let theta: [f64; D] = theta.try_into().expect("theta length");
        let mut grad = [0.0; D];
        for (x, &r) in features.chunks_exact(D).zip(rewards) {
            let z = dot(x, &theta);
            let resid = self.add_row(link, z, r)?;
            for i in 0..D {
                grad[i] += resid * x[i];
            }
        }
        for (g, a) in self.grad.iter_mut().zip(grad) {
            *g += a;
        }
        Ok(())
    }

    fn add_rows_any(
        &mut self,
        link: &LinkSpec,
        features: &[f64],
        rewards: &[f64],
        theta: &[f64],
    ) -> Result<(), EstimationError> {
        for (x, &r) in features.chunks_exact(theta.len().max(1)).zip(rewards) {
            let resid = self.add_row(link, dot(x, theta), r)?;
            for (g, xi) in self.grad.iter_mut().zip(x) {
                *g += resid * xi;
            }
        }
        Ok(())
    }

    fn objective(&self, theta: &DVector<f64>, lambda: f64) -> f64 {
        self.linear + self.log + self.product.ln() + 0.5 * lambda * theta.norm_squared()
    }

    fn gradient(&self, theta: &DVector<f64>, lambda: f64) -> DVector<f64> {
        DVector::from_iterator(
            theta.len(),
            self.grad.iter().zip(theta.iter()).map(|(g, t)| g + lambda * t),
        )
    }
}

/// State carried between solves over a growing history.
///
/// A solve that starts where the previous one ended, on the same rows and
/// rewards plus new ones, only evaluates the new rows. Its first step uses
/// the last Hessian of the previous solve extended by the new rows; later
/// steps, and a first step the line search rejects, use the exact Hessian.
#[derive(Debug, Clone, Default)]
pub struct NewtonCache {
    end: Option<(DVector<f64>, RowSums)>,
    rewards: Vec<f64>,
    /// Upper triangle of the last Hessian (without the ridge) and the rows it covers.
    hess: Vec<f64>,
    hess_rows: usize,
}

impl NewtonCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forgets the stored solution.
    pub fn clear(&mut self) {
        self.end = None;
        self.rewards.clear();
        self.hess.clear();
        self.hess_rows = 0;
    }

    /// The stored solution point with its rewards replaced by `rewards`, so
    /// a solve on the same rows with other rewards starts without a full
    /// evaluation. `None` when nothing is stored or the lengths differ.
    pub fn with_rewards(&self, features: &[f64], rewards: &[f64]) -> Option<NewtonCache> {
        let (theta, sums) = self.end.as_ref()?;
        if rewards.len() != self.rewards.len() {
            return None;
        }
        let dim = theta.len();
        let mut shift = vec![0.0; dim];
        for ((x, new), old) in features.chunks_exact(dim.max(1)).zip(rewards).zip(&self.rewards) {
            let d = new - old;
            for (s, xi) in shift.iter_mut().zip(x) {
                *s += d * xi;
            }
        }
        // g(z) - r z and (mu - r) x are affine in r
        let mut sums = sums.clone();
        sums.linear -= dot(&shift, theta.as_slice());
        for (g, s) in sums.grad.iter_mut().zip(&shift) {
            *g -= s;
        }
        Some(NewtonCache {
            end: Some((theta.clone(), sums)),
            rewards: rewards.to_vec(),
            hess: self.hess.clone(),
            hess_rows: self.hess_rows,
        })
    }
}

/// [`solve_regularized_mle`] reusing and updating `cache`. Rows seen by
/// earlier calls must be unchanged, with new rows appended.
#[allow(clippy::too_many_arguments)]
pub fn solve_regularized_mle_cached(
    link: &LinkSpec,
    dim: usize,
    features: &[f64],
    rewards: &[f64],
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    opts: NewtonOptions,
    cache: &mut NewtonCache,
) -> Result<MleSolution, EstimationError> {
    if !(lambda > 0.0) {
        return Err(EstimationError::InvalidLambda(lambda));
    }
    let n = rewards.len();
    debug_assert_eq!(features.len(), n * dim);
    let start = match warm_start {
        Some(w) if w.len() == dim => w.clone(),
        _ => DVector::zeros(dim),
    };
    let kept = cache.rewards.len();
    let resume = matches!(&cache.end, Some((t, s))
        if *t == start && s.grad.len() == dim && kept <= n && cache.rewards[..] == rewards[..kept]);
    let (mut theta, mut sums, done) = match cache.end.take() {
        Some((t, s)) if resume => (t, s, kept),
        _ => (start, RowSums::new(dim), 0),
    };
    sums.add_rows(link, &features[done * dim..], &rewards[done..], theta.as_slice())?;
    cache.rewards.clear();
    let mut carried = resume && cache.hess.len() == dim * dim && cache.hess_rows <= n;
    if !carried {
        cache.hess.clear();
        cache.hess.resize(dim * dim, 0.0);
        cache.hess_rows = 0;
    }

    let mut objective = sums.objective(&theta, lambda);
    let mut grad = sums.gradient(&theta, lambda);
    let mut trial = RowSums::new(dim);
    let mut trial_theta = DVector::zeros(dim);
    let mut iterations = 0;
    let converged = loop {
        if grad.norm() <= opts.grad_tol {
            break true;
        }
        if iterations >= opts.max_iter {
            break false;
        }
        iterations += 1;

        let accepted = loop {
            let from = if carried { cache.hess_rows } else { 0 };
            if from == 0 {
                cache.hess.iter_mut().for_each(|v| *v = 0.0);
            }
            accumulate_gram_into(&features[from * dim..], dim, &sums.weights[from..], &mut cache.hess);
            cache.hess_rows = n;
            let step = gram_to_sym(&cache.hess, dim, lambda).factor()?.solve(&grad)?;

            let slack = 1e-12 * objective.abs().max(1.0);
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                trial_theta.copy_from(&theta);
                trial_theta.axpy(-scale, &step, 1.0);
                trial.reset();
                // an overflowing trial is treated as a failed step
                let value = match trial.add_rows(link, features, rewards, trial_theta.as_slice()) {
                    Ok(()) => trial.objective(&trial_theta, lambda),
                    Err(_) => f64::INFINITY,
                };
                if value <= objective + slack {
                    std::mem::swap(&mut theta, &mut trial_theta);
                    std::mem::swap(&mut sums, &mut trial);
                    objective = value;
                    grad = sums.gradient(&theta, lambda);
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            let retry = !accepted && carried && from > 0;
            carried = false;
            if !retry {
                break accepted;
            }
        };
        if !accepted {
            break false;
        }
    };
    let grad_norm = grad.norm();
    cache.rewards.extend_from_slice(rewards);
    cache.end = Some((theta.clone(), sums));
    Ok(MleSolution {
        theta,
        grad_norm,
        iterations,
        converged,
    })
}

/// The rows of `features` as the columns of a `dim x n` matrix.
fn columns(features: &[f64], dim: usize) -> DMatrixView<'_, f64> {
    let n = features.len().checked_div(dim).unwrap_or(0);
    DMatrixView::from_slice(features, dim, n)
}

fn compute_logits(features: &[f64], dim: usize, theta: &[f64], out: &mut [f64]) {
    let x = columns(features, dim);
    let theta = DVectorView::from_slice(theta, dim);
    let n = out.len();
    DVectorViewMut::from_slice(out, n).gemv_tr(1.0, &x, &theta, 0.0);
}

fn gradient(
    features: &[f64],
    dim: usize,
    rewards: &[f64],
    mu: &[f64],
    theta: &DVector<f64>,
    lambda: f64,
    grad: &mut DVector<f64>,
) {
    let resid = DVector::from_iterator(rewards.len(), mu.iter().zip(rewards).map(|(m, r)| m - r));
    grad.copy_from(theta);
    grad.gemv(1.0, &columns(features, dim), &resid, lambda);
}

/// Upper triangle of `sum w_tau x_tau x_tau^T` into the row-major `out`.
fn accumulate_gram(features: &[f64], dim: usize, weights: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    accumulate_gram_into(features, dim, weights, out);
}

fn accumulate_gram_into(features: &[f64], dim: usize, weights: &[f64], out: &mut [f64]) {
    macro_rules! fixed {
        ($($d:literal)*) => {
            match dim {
                $($d => gram_fixed::<$d>(features, weights, out),)*
                _ => gram_any(features, dim, weights, out),
            }
        };
    }
    fixed!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16)
}

fn gram_fixed<const D: usize>(features: &[f64], weights: &[f64], out: &mut [f64]) {
    let mut acc = [[0.0; D]; D];
    for (x, &w) in features.chunks_exact(D).zip(weights) {
        for i in 0..D {
            let wxi = w * x[i];
            for j in i..D {
                acc[i][j] += wxi * x[j];
            }
        }
    }
    for i in 0..D {
        for j in i..D {
            out[i * D + j] += acc[i][j];
        }
    }
}

fn gram_any(features: &[f64], dim: usize, weights: &[f64], out: &mut [f64]) {
    for (x, &w) in features.chunks_exact(dim.max(1)).zip(weights) {
        for i in 0..dim {
            let wxi = w * x[i];
            let row = &mut out[i * dim + i..(i + 1) * dim];
            for (hij, xj) in row.iter_mut().zip(&x[i..]) {
                *hij += wxi * xj;
            }
        }
    }
}

fn gram_to_sym(upper: &[f64], dim: usize, lambda: f64) -> SymMatrix {
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let v = upper[i * dim + j];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += lambda;
    }
    SymMatrix::from_upper(m)
}

/// Outcome of one successful refit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Counters accumulated over the life of an estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitStats {
    pub fits: usize,
    /// Newton iterations summed over all fits.
    pub newton_iterations: usize,
    pub non_converged: usize,
    pub clipped: usize,
}

/// Current MLE and Gram matrices for one bandit run.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    link: LinkSpec,
    lambda: f64,
    norm_bound: Option<f64>,
    mean_bound: f64,
    theta_hat: DVector<f64>,
    /// Last Newton iterate before clipping; the next warm start.
    theta_mle: DVector<f64>,
    h_hat: SymMatrix,
    h_factor: SpdFactor,
    v: SymMatrix,
    v_factor: SpdFactor,
    b: DVector<f64>,
    history: History,
    loss_lipschitz: f64,
    stale: bool,
    newton: NewtonOptions,
    newton_cache: NewtonCache,
    stats: FitStats,
}

impl EstimatorState {
    /// Empty estimator: `theta_hat = 0`, `H_hat = V = lambda I`.
    pub fn new(link: LinkSpec, dim: usize, lambda: f64) -> Result<Self, EstimationError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(EstimationError::InvalidLambda(lambda));
        }
        let v = SymMatrix::scaled_identity(dim, lambda);
        let factor = v.factor()?;
        Ok(Self {
            link,
            lambda,
            norm_bound: None,
            mean_bound: link.mean_bound(1.0),
            theta_hat: DVector::zeros(dim),
            theta_mle: DVector::zeros(dim),
            h_hat: v.clone(),
            h_factor: factor.clone(),
            v,
            v_factor: factor,
            b: DVector::zeros(dim),
            history: History::new(dim),
            loss_lipschitz: 0.0,
            stale: false,
            newton: NewtonOptions::default(),
            newton_cache: NewtonCache::new(),
            stats: FitStats::default(),
        })
    }

    /// Rescales `theta_hat` onto the ball `|theta| <= bound` whenever a fit
    /// leaves it, and uses `bound` for the reward envelope in `L_t`.
    pub fn with_norm_bound(mut self, bound: f64) -> Self {
        self.norm_bound = Some(bound);
        self.mean_bound = self.link.mean_bound(bound);
        self
    }

    pub fn with_newton_options(mut self, opts: NewtonOptions) -> Self {
        self.newton = opts;
        self
    }

    pub fn link(&self) -> &LinkSpec {
        &self.link
    }

    pub fn dim(&self) -> usize {
        self.history.dim()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// The round index `t = 1 + |history|`.
    pub fn t(&self) -> usize {
        1 + self.history.len()
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Last Newton iterate before clipping.
    pub fn theta_mle(&self) -> &DVector<f64> {
        &self.theta_mle
    }

    /// Newton state at [`Self::theta_mle`].
    pub fn newton_cache(&self) -> &NewtonCache {
        &self.newton_cache
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    /// `max(|theta_hat|, 1e-6)`.
    pub fn theta_norm_floored(&self) -> f64 {
        self.theta_hat.norm().max(THETA_NORM_FLOOR)
    }

    pub fn h_hat(&self) -> &SymMatrix {
        &self.h_hat
    }

    pub fn h_factor(&self) -> &SpdFactor {
        &self.h_factor
    }

    pub fn v(&self) -> &SymMatrix {
        &self.v
    }

    pub fn v_factor(&self) -> &SpdFactor {
        &self.v_factor
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Gram matrix that shapes exploration: `V` for the linear link,
    /// `H_hat` otherwise (they coincide for the linear link).
    pub fn gram_factor(&self) -> &SpdFactor {
        &self.h_factor
    }

    /// True when observations were pushed since the last refit.
    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn stats(&self) -> FitStats {
        self.stats
    }

    /// Running envelope `L_t = sum (|r| + R_max) |x|` on the loss gradient.
    pub fn loss_lipschitz(&self) -> f64 {
        self.loss_lipschitz
    }

    /// Appends `(x, r)` and updates `V` and `b`. Call [`Self::refit`] before
    /// reading `theta_hat` or `H_hat` again.
    pub fn push(&mut self, x: &DVector<f64>, r: f64) -> Result<(), EstimationError> {
        self.history.push(x.as_slice(), r)?;
        self.v.add_outer(x, 1.0);
        self.v_factor = self.v.factor()?;
        self.b.axpy(r, x, 1.0);
        self.loss_lipschitz += (r.abs() + self.mean_bound) * x.norm();
        self.stale = true;
        Ok(())
    }

    /// Recomputes `theta_hat` and `H_hat` from the full history.
    ///
    /// On `NoConvergence` the state keeps the last Newton iterate (with its
    /// `H_hat`) so the caller may continue.
    pub fn refit(&mut self) -> Result<FitReport, EstimationError> {
        self.stats.fits += 1;
        self.stale = false;
        let dim = self.dim();
        let (theta, iterations, grad_norm, converged) = match self.link.kind {
            LinkKind::Linear => (self.v_factor.solve(&self.b)?, 0, 0.0, true),
            _ => {
                let warm = self.theta_mle.clone();
                let sol = solve_regularized_mle_cached(
                    &self.link,
                    dim,
                    self.history.features(),
                    self.history.rewards(),
                    self.lambda,
                    Some(&warm),
                    self.newton,
                    &mut self.newton_cache,
                )?;
                (sol.theta, sol.iterations, sol.grad_norm, sol.converged)
            }
        };
        self.stats.newton_iterations += iterations;
        self.theta_mle = theta.clone();
        self.theta_hat = theta;
        let clipped = self.clip();

        match self.link.kind {
            LinkKind::Linear => {
                self.h_hat = self.v.clone();
                self.h_factor = self.v_factor.clone();
            }
            _ if self.link.constant_derivative().is_some() => {
                // H_hat = lambda I + c (V - lambda I)
                let c = self.link.constant_derivative().unwrap_or(1.0);
                let mut m = self.v.as_matrix() * c;
                for i in 0..dim {
                    m[(i, i)] += self.lambda * (1.0 - c);
                }
                self.h_hat = SymMatrix::from_upper(m);
                self.h_factor = self.h_hat.factor()?;
            }
            _ => {
                let mut weights = vec![0.0; self.history.len()];
                compute_logits(self.history.features(), dim, self.theta_hat.as_slice(), &mut weights);
                weights.iter_mut().for_each(|z| *z = self.link.mu_dot(*z));
                let mut upper = vec![0.0; dim * dim];
                accumulate_gram(self.history.features(), dim, &weights, &mut upper);
                self.h_hat = gram_to_sym(&upper, dim, self.lambda);
                self.h_factor = self.h_hat.factor()?;
            }
        }

        if !converged {
            self.stats.non_converged += 1;
            return Err(EstimationError::NoConvergence { grad_norm, iterations });
        }
        Ok(FitReport {
            iterations,
            grad_norm,
            clipped,
        })
    }

    fn clip(&mut self) -> bool {
        if let Some(bound) = self.norm_bound {
            let n = self.theta_hat.norm();
            if n > bound {
                self.theta_hat *= bound / n;
                self.stats.clipped += 1;
                return true;
            }
        }
        false
    }

    /// `|x|_{H_hat^{-1}}`.
    pub fn width(&self, x: &DVector<f64>) -> Result<f64, EstimationError> {
        Ok(self.h_factor.inv_norm(x.as_slice())?)
    }

    /// `|x|_{V^{-1}}`.
    pub fn v_width(&self, x: &DVector<f64>) -> Result<f64, EstimationError> {
        Ok(self.v_factor.inv_norm(x.as_slice())?)
    }

    /// Gradient of the regularized loss at `theta_hat`.
    pub fn regularized_gradient(&self) -> DVector<f64> {
        let dim = self.dim();
        let mut mu = vec![0.0; self.history.len()];
        compute_logits(self.history.features(), dim, self.theta_hat.as_slice(), &mut mu);
        mu.iter_mut().for_each(|z| *z = self.link.mu(*z));
        let mut grad = DVector::zeros(dim);
        gradient(
            self.history.features(),
            dim,
            self.history.rewards(),
            &mu,
            &self.theta_hat,
            self.lambda,
            &mut grad,
        );
        grad
    }

    /// Confidence parameters for the current round at level `delta`.
    pub fn confidence(&self, delta: f64, horizon: usize) -> Result<ConfidenceParams, EstimationError> {
        ConfidenceParams::new(
            delta,
            horizon,
            self.link.self_concordance(),
            self.dim(),
            self.lambda,
            self.loss_lipschitz,
        )
    }
}

/// Fits a fresh estimator to `history`.
pub fn fit_mle(
    link: LinkSpec,
    history: &History,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
) -> Result<EstimatorState, EstimationError> {
    let mut state = EstimatorState::new(link, history.dim(), lambda)?;
    for (x, r) in history.iter() {
        state.push(&DVector::from_column_slice(x), r)?;
    }
    if let Some(w) = warm_start {
        state.theta_hat = w.clone();
        state.theta_mle = w.clone();
    }
    state.refit()?;
    Ok(state)
}

/// Inputs of the confidence radius `beta_t(delta)` and the perturbation
/// width `gamma_t(delta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    pub delta: f64,
    pub horizon: usize,
    pub m_mu: f64,
    pub dim: usize,
    pub lambda: f64,
    /// `L_t`, an upper bound on the Lipschitz constant of the loss.
    pub loss_lipschitz: f64,
}

impl ConfidenceParams {
    pub fn new(
        delta: f64,
        horizon: usize,
        m_mu: f64,
        dim: usize,
        lambda: f64,
        loss_lipschitz: f64,
    ) -> Result<Self, EstimationError> {
        check_delta(delta)?;
        Ok(Self {
            delta,
            horizon: horizon.max(1),
            m_mu,
            dim,
            lambda,
            loss_lipschitz,
        })
    }

    /// `delta' = delta / (4T)`.
    pub fn delta_prime(&self) -> f64 {
        self.delta / (4.0 * self.horizon as f64)
    }

    /// `beta_t(delta)` at the stored level.
    pub fn beta(&self) -> Result<f64, EstimationError> {
        self.beta_at(self.delta)
    }

    /// `sqrt(4 lambda + 2 (1 + M) (log(1/delta) + d log(2 e L_t / d)))`.
    ///
    /// The `d log(...)` term is floored at zero: for `L_t < d / (2e)` (early
    /// rounds, `L_0 = 0`) it would otherwise be negative or undefined.
    pub fn beta_at(&self, delta: f64) -> Result<f64, EstimationError> {
        check_delta(delta)?;
        let d = self.dim as f64;
        let volume = if self.loss_lipschitz > 0.0 {
            (d * (2.0 * std::f64::consts::E * self.loss_lipschitz / d).ln()).max(0.0)
        } else {
            0.0
        };
        let inner = 4.0 * self.lambda + 2.0 * (1.0 + self.m_mu) * ((1.0 / delta).ln() + volume);
        Ok(inner.sqrt())
    }

    /// `gamma_t(delta) = beta_t(delta') sqrt(c log(c'/delta'))`.
    pub fn gamma(&self, c: f64, c_prime: f64) -> Result<f64, EstimationError> {
        let dp = self.delta_prime();
        Ok(self.beta_at(dp)? * concentration_multiplier(c, c_prime, dp)?)
    }
}

/// `sqrt(c log(c'/delta))`, the tail quantile of a perturbation satisfying
/// the concentration property with constants `(c, c')`.
pub fn concentration_multiplier(c: f64, c_prime: f64, delta: f64) -> Result<f64, EstimationError> {
    check_delta(delta)?;
    Ok((c * (c_prime / delta).ln()).max(0.0).sqrt())
}

fn check_delta(delta: f64) -> Result<(), EstimationError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(EstimationError::InvalidDelta(delta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn e(dim: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        v
    }

    fn hist(dim: usize, rows: &[(DVector<f64>, f64)]) -> History {
        let mut h = History::new(dim);
        for (x, r) in rows {
            h.push(x.as_slice(), *r).unwrap();
        }
        h
    }

    #[test]
    fn nll_examples() {
        let empty = History::new(3);
        let theta = DVector::from_column_slice(&[0.4, -1.0, 2.0]);
        assert_eq!(neg_log_likelihood(&LinkSpec::logistic(), &empty, &theta).unwrap(), 0.0);

        let h = hist(2, &[(e(2, 0), 1.0)]);
        let nll = neg_log_likelihood(&LinkSpec::linear(), &h, &e(2, 0)).unwrap();
        assert_abs_diff_eq!(nll, -0.5, epsilon = 1e-15);
        let nll = neg_log_likelihood(&LinkSpec::logistic(), &h, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(nll, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn nll_poisson_overflow() {
        let h = hist(1, &[(e(1, 0), 1.0)]);
        let theta = DVector::from_element(1, 800.0);
        assert!(matches!(
            neg_log_likelihood(&LinkSpec::poisson(), &h, &theta),
            Err(EstimationError::Link(LinkError::Overflow(_)))
        ));
    }

    #[test]
    fn linear_single_observation_ridge() {
        let h = hist(2, &[(e(2, 0), 1.0)]);
        let s = fit_mle(LinkSpec::linear(), &h, 1.0, None).unwrap();
        assert_abs_diff_eq!(s.theta_hat(), &DVector::from_column_slice(&[0.5, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn empty_history_is_pure_regularizer() {
        for link in [LinkSpec::linear(), LinkSpec::logistic(), LinkSpec::poisson()] {
            let s = fit_mle(link, &History::new(3), 0.7, None).unwrap();
            assert_eq!(s.theta_hat(), &DVector::zeros(3));
            assert_eq!(s.h_hat(), &SymMatrix::scaled_identity(3, 0.7));
            assert_eq!(s.v(), &SymMatrix::scaled_identity(3, 0.7));
            assert_eq!(s.t(), 1);
        }
    }

    #[test]
    fn balanced_logistic_labels_give_zero_logit() {
        let mut rows = Vec::new();
        for _ in 0..50 {
            rows.push((e(1, 0), 1.0));
            rows.push((e(1, 0), 0.0));
        }
        let h = hist(1, &rows);
        let s = fit_mle(LinkSpec::logistic(), &h, 1e-4, None).unwrap();
        let link = LinkSpec::logistic();
        // grid-search oracle on the regularized objective over [-1, 1]
        let best = (0..=20_000)
            .map(|i| -1.0 + i as f64 * 1e-4)
            .map(|th| {
                let t = DVector::from_element(1, th);
                (th, neg_log_likelihood(&link, &h, &t).unwrap() + 0.5e-4 * th * th)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert!(s.theta_hat()[0].abs() <= 0.01);
        assert!((s.theta_hat()[0] - best).abs() <= 2e-4);
    }

    fn random_history(link: LinkSpec, dim: usize, n: usize, seed: u64) -> (History, DVector<f64>) {
        let mut rng = stream(seed, "est-test");
        let theta_star = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let mut h = History::new(dim);
        for _ in 0..n {
            let x = DVector::from_fn(dim, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g / (dim as f64).sqrt()
            });
            let z = x.dot(&theta_star);
            let r = link.sample_reward(z, 1.0, &mut rng);
            h.push(x.as_slice(), r).unwrap();
        }
        (h, theta_star)
    }

    #[test]
    fn chunked_objective_matches_direct_sum() {
        let link = LinkSpec::logistic();
        let (h, theta) = random_history(link, 3, 1300, 40);
        let mut sums = RowSums::new(3);
        sums.add_rows(&link, h.features(), h.rewards(), theta.as_slice())
            .unwrap();
        let direct = neg_log_likelihood(&link, &h, &theta).unwrap() + 0.5 * 0.3 * theta.norm_squared();
        assert_abs_diff_eq!(sums.objective(&theta, 0.3), direct, epsilon = 1e-10);
    }

    #[test]
    fn resumed_solves_match_fresh_ones() {
        for (link, dim) in [
            (LinkSpec::logistic(), 4),
            (LinkSpec::poisson(), 3),
            (LinkSpec::logistic(), 20),
        ] {
            let (h, _) = random_history(link, dim, 300, 41);
            let opts = NewtonOptions::default();
            let mut cache = NewtonCache::new();
            let mut warm: Option<DVector<f64>> = None;
            for n in [10, 11, 12, 50, 51, 300] {
                let (f, r) = (&h.features()[..n * dim], &h.rewards()[..n]);
                let cached =
                    solve_regularized_mle_cached(&link, dim, f, r, 0.5, warm.as_ref(), opts, &mut cache).unwrap();
                let fresh = solve_regularized_mle(&link, dim, f, r, 0.5, None, opts).unwrap();
                assert!(cached.converged && fresh.converged);
                assert!((&cached.theta - &fresh.theta).amax() <= 1e-8, "n = {n}");
                warm = Some(cached.theta);
            }
        }
    }

    #[test]
    fn reward_swap_matches_a_fresh_solve() {
        let link = LinkSpec::logistic();
        let (h, _) = random_history(link, 5, 200, 42);
        let opts = NewtonOptions::default();
        let mut cache = NewtonCache::new();
        let base =
            solve_regularized_mle_cached(&link, 5, h.features(), h.rewards(), 1.0, None, opts, &mut cache).unwrap();
        let pseudo: Vec<f64> = h
            .rewards()
            .iter()
            .enumerate()
            .map(|(i, r)| r + (i as f64 * 0.37).sin())
            .collect();
        let mut swapped = cache.with_rewards(h.features(), &pseudo).unwrap();
        assert!(cache.with_rewards(h.features(), &pseudo[1..]).is_none());
        let a = solve_regularized_mle_cached(
            &link,
            5,
            h.features(),
            &pseudo,
            1.0,
            Some(&base.theta),
            opts,
            &mut swapped,
        )
        .unwrap();
        let b = solve_regularized_mle(&link, 5, h.features(), &pseudo, 1.0, None, opts).unwrap();
        assert!(a.converged && b.converged);
        assert!((a.theta - b.theta).amax() <= 1e-8);
    }

    #[test]
    fn linear_fit_matches_ridge_closed_form_via_newton() {
        // the Newton solver on the quadratic loss must agree with V^{-1} b
        for k in 0..100u64 {
            let dim = 1 + (k as usize % 10);
            let n = (k as usize * 7) % 51;
            let (h, _) = random_history(LinkSpec::linear(), dim, n, k);
            let lambda = 0.1 + (k % 5) as f64;
            let closed = fit_mle(LinkSpec::linear(), &h, lambda, None).unwrap();
            let newton = solve_regularized_mle(
                &LinkSpec::linear(),
                dim,
                h.features(),
                h.rewards(),
                lambda,
                None,
                NewtonOptions::default(),
            )
            .unwrap();
            assert!(newton.converged);
            assert!((closed.theta_hat() - &newton.theta).amax() <= 1e-8);
        }
    }

    #[test]
    fn logistic_fits_are_first_order_optimal() {
        for k in 0..30u64 {
            let (h, _) = random_history(
                LinkSpec::logistic(),
                1 + (k as usize % 6),
                20 + 10 * k as usize,
                100 + k,
            );
            let s = fit_mle(LinkSpec::logistic(), &h, 0.5, None).unwrap();
            assert!(s.regularized_gradient().norm() <= 1e-6);
        }
    }

    #[test]
    fn poisson_fit_converges() {
        let (h, _) = random_history(LinkSpec::poisson(), 3, 200, 9);
        let s = fit_mle(LinkSpec::poisson(), &h, 1.0, None).unwrap();
        assert!(s.regularized_gradient().norm() <= 1e-6);
    }

    #[test]
    fn weighted_gram_dominates_scaled_vanilla_gram() {
        let mut rng = stream(77, "x");
        for k in 0..50u64 {
            let dim = 2 + (k as usize % 4);
            let (h, _) = random_history(LinkSpec::logistic(), dim, 40, 500 + k);
            let lambda = 0.3;
            let s = fit_mle(LinkSpec::logistic(), &h, lambda, None).unwrap();
            let link = LinkSpec::logistic();
            let kappa = h
                .iter()
                .map(|(x, _)| link.mu_dot(dot(x, s.theta_hat().as_slice())))
                .fold(f64::INFINITY, f64::min);
            let mut vbar = SymMatrix::scaled_identity(dim, lambda / kappa);
            for (x, _) in h.iter() {
                vbar.add_outer_slice(x, 1.0);
            }
            let vbar = vbar.factor().unwrap();
            for _ in 0..10 {
                let x = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
                let lhs = s.h_factor().quad_form_inv(x.as_slice()).unwrap();
                let rhs = vbar.quad_form_inv(x.as_slice()).unwrap() / kappa;
                assert!(lhs <= rhs * (1.0 + 1e-9), "{lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn gram_invariants_hold_after_pushes() {
        let (h, _) = random_history(LinkSpec::logistic(), 4, 60, 3);
        let mut s = EstimatorState::new(LinkSpec::logistic(), 4, 0.2).unwrap();
        for (i, (x, r)) in h.iter().enumerate() {
            s.push(&DVector::from_column_slice(x), r).unwrap();
            s.refit().unwrap();
            assert_eq!(s.t(), i + 2);
            assert!(s.h_hat().min_eigenvalue() >= 0.2 - 1e-10);
            assert!(s.v().min_eigenvalue() >= 0.2 - 1e-10);
        }
        let (h, _) = random_history(LinkSpec::linear(), 4, 30, 4);
        let s = fit_mle(LinkSpec::linear(), &h, 0.2, None).unwrap();
        assert_eq!(s.h_hat(), s.v());
    }

    #[test]
    fn norm_clipping_rescales_and_counts() {
        let h = hist(1, &[(e(1, 0), 10.0)]);
        let mut s = EstimatorState::new(LinkSpec::linear(), 1, 1e-4)
            .unwrap()
            .with_norm_bound(2.0);
        s.push(&e(1, 0), 10.0).unwrap();
        let report = s.refit().unwrap();
        assert!(report.clipped);
        assert_abs_diff_eq!(s.theta_hat()[0], 2.0, epsilon = 1e-12);
        assert_eq!(s.stats().clipped, 1);
        assert_eq!(s.history(), &h);
    }

    #[test]
    fn no_convergence_keeps_last_iterate() {
        let (h, _) = random_history(LinkSpec::logistic(), 3, 100, 12);
        let mut s = EstimatorState::new(LinkSpec::logistic(), 3, 1.0)
            .unwrap()
            .with_newton_options(NewtonOptions {
                grad_tol: 1e-8,
                max_iter: 1,
                max_halvings: 20,
            });
        for (x, r) in h.iter() {
            s.push(&DVector::from_column_slice(x), r).unwrap();
        }
        let err = s.refit().unwrap_err();
        assert!(matches!(err, EstimationError::NoConvergence { iterations: 1, .. }));
        assert_ne!(s.theta_hat(), &DVector::zeros(3));
        assert_eq!(s.stats().non_converged, 1);
    }

    #[test]
    fn beta_examples() {
        let p = ConfidenceParams::new(0.1, 1, 0.0, 2, 1.0, 2.0).unwrap();
        // 30-digit evaluation of sqrt(4 + 2 (ln 10 + 2 ln(2e)))
        assert_abs_diff_eq!(p.beta().unwrap(), 3.921_448_572_686_868, epsilon = 1e-12);

        let p = ConfidenceParams::new(0.5, 1, 0.0, 2, 1.0, 1.0 / std::f64::consts::E).unwrap();
        // with L_t = d/(2e) the volume term vanishes; delta -> 1 leaves 4 lambda
        assert_abs_diff_eq!(p.beta_at(1.0 - 1e-15).unwrap(), 2.0, epsilon = 1e-6);

        let lo = ConfidenceParams::new(0.1, 1, 1.0, 3, 1.0, 5.0).unwrap();
        let hi = ConfidenceParams {
            loss_lipschitz: 10.0,
            ..lo
        };
        assert!(hi.beta().unwrap() > lo.beta().unwrap());
    }

    #[test]
    fn beta_rejects_bad_delta() {
        for d in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(
                ConfidenceParams::new(d, 10, 0.0, 2, 1.0, 1.0),
                Err(EstimationError::InvalidDelta(_))
            ));
        }
    }

    #[test]
    fn beta_is_monotone_in_rounds_and_confidence() {
        let (h, _) = random_history(LinkSpec::logistic(), 3, 80, 5);
        let mut s = EstimatorState::new(LinkSpec::logistic(), 3, 1.0).unwrap();
        let mut prev = 0.0;
        for (x, r) in h.iter() {
            s.push(&DVector::from_column_slice(x), r).unwrap();
            let b = s.confidence(0.05, 80).unwrap().beta().unwrap();
            assert!(b >= prev);
            prev = b;
        }
        let p = s.confidence(0.05, 80).unwrap();
        assert!(p.beta_at(0.01).unwrap() > p.beta_at(0.05).unwrap());
    }

    #[test]
    fn gamma_multiplier_examples() {
        let e2 = std::f64::consts::E.powi(2);
        assert_abs_diff_eq!(
            concentration_multiplier(2.0, 2.0, 2.0 / e2).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            concentration_multiplier(2.0, 2.0, 0.5).unwrap(),
            1.665_109_222_315_395_5,
            epsilon = 1e-14
        );

        let p = ConfidenceParams::new(0.1, 100, 1.0, 5, 1.0, 40.0).unwrap();
        assert_eq!(p.delta_prime(), 0.1 / 400.0);
        assert!(p.gamma(2.0, 2.0).unwrap() >= p.beta_at(p.delta_prime()).unwrap());
    }

    #[test]
    fn saturated_floor_gram_matches_accumulation() {
        let link = LinkSpec::logistic().with_derivative_floor(0.25);
        let (h, _) = random_history(link, 4, 60, 21);
        let s = fit_mle(link, &h, 0.01, None).unwrap();
        let mut weights = vec![0.0; h.len()];
        compute_logits(h.features(), 4, s.theta_hat().as_slice(), &mut weights);
        weights.iter_mut().for_each(|z| *z = link.mu_dot(*z));
        let mut upper = vec![0.0; 16];
        accumulate_gram(h.features(), 4, &weights, &mut upper);
        let direct = gram_to_sym(&upper, 4, 0.01);
        assert!((direct.as_matrix() - s.h_hat().as_matrix()).amax() <= 1e-12);
        assert_eq!(link.constant_derivative(), Some(0.25));
        assert_eq!(
            LinkSpec::logistic().with_derivative_floor(0.2).constant_derivative(),
            None
        );
    }

    #[test]
    fn clipping_keeps_the_unclipped_warm_start() {
        let link = LinkSpec::logistic();
        let mut s = EstimatorState::new(link, 1, 1e-4).unwrap().with_norm_bound(0.5);
        for _ in 0..10 {
            s.push(&DVector::from_column_slice(&[1.0]), 1.0).unwrap();
            s.push(&DVector::from_column_slice(&[1.0]), 1.0).unwrap();
            s.push(&DVector::from_column_slice(&[1.0]), 0.0).unwrap();
        }
        s.refit().unwrap();
        assert_eq!(s.theta_hat()[0], 0.5);
        // unclipped optimum is log 2; a second refit starts there
        s.refit().unwrap();
        assert!(s.stats().newton_iterations <= 8);
        assert_eq!(s.stats().clipped, 2);
    }
}
