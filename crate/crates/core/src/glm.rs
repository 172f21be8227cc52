//! Mean functions, context sets, weighted Gram matrices and the Newton solver
//! for ridge-regularized GLM score equations.
//!
//! Every estimator in this crate reduces to solving
//!
//! ```text
//! sum_k { y_k - mu(x_k' beta) } x_k - lambda * beta = 0
//! ```
//!
//! for a canonical link, i.e. minimizing the strictly convex objective
//! `sum_k { b(x_k' beta) - y_k x_k' beta } + (lambda / 2) |beta|^2`.
//! Targets may be arbitrary reals: pseudo-rewards routinely leave `[0, 1]`.
//!
//! Contexts are passed as row-major `n x dim` slices so that the estimators can
//! hand over their append-only context stacks without copying.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Admissible radius used by [`logistic_mean`] when none is supplied.
pub const DEFAULT_RADIUS: f64 = 1.0;

/// Slack allowed on the unit-norm constraint for contexts read from files.
pub const NORM_SLACK: f64 = 1e-9;

/// A canonical-link GLM mean function together with its curvature constants.
///
/// `cumulant` is the log-partition function `b` with `b' = mu`. `kappa` is the
/// infimum of `mu'` over `[-radius, radius]`, `l1` the supremum of `mu'` and
/// `l2` the supremum of `|mu''|`.
#[derive(Clone, Copy)]
pub struct MeanFunction {
    name: &'static str,
    mu: fn(f64) -> f64,
    mu_prime: fn(f64) -> f64,
    cumulant: fn(f64) -> f64,
    kappa: f64,
    l1: f64,
    l2: f64,
    radius: f64,
}

impl fmt::Debug for MeanFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeanFunction")
            .field("name", &self.name)
            .field("kappa", &self.kappa)
            .field("l1", &self.l1)
            .field("l2", &self.l2)
            .field("radius", &self.radius)
            .finish()
    }
}

impl MeanFunction {
    /// Build a custom canonical mean function. `kappa` is computed over
    /// `[-radius, radius]` with [`kappa_for_radius`].
    pub fn custom(
        name: &'static str,
        mu: fn(f64) -> f64,
        mu_prime: fn(f64) -> f64,
        cumulant: fn(f64) -> f64,
        l1: f64,
        l2: f64,
        radius: f64,
    ) -> Result<Self> {
        if !(l1 > 0.0 && l1.is_finite()) || !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!(
                "mean function constants must be positive and finite (l1={l1}, l2={l2})"
            )));
        }
        let kappa = kappa_for_radius(mu_prime, radius)?;
        Ok(Self {
            name,
            mu,
            mu_prime,
            cumulant,
            kappa,
            l1,
            l2,
            radius,
        })
    }

    /// Same link, with `kappa` recomputed for a new admissible radius.
    pub fn with_radius(self, radius: f64) -> Result<Self> {
        let kappa = kappa_for_radius(self.mu_prime, radius)?;
        Ok(Self {
            kappa,
            radius,
            ..self
        })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    #[inline]
    pub fn mu(&self, z: f64) -> f64 {
        (self.mu)(z)
    }

    #[inline]
    pub fn mu_prime(&self, z: f64) -> f64 {
        (self.mu_prime)(z)
    }

    #[inline]
    pub fn cumulant(&self, z: f64) -> f64 {
        (self.cumulant)(z)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Look a built-in link up by name (`"logistic"` or `"linear"`).
    pub fn by_name(name: &str, radius: f64) -> Result<Self> {
        match name {
            "logistic" => logistic_mean().with_radius(radius),
            "linear" | "identity" => linear_mean().with_radius(radius),
            other => Err(Error::Config(format!("unknown link function {other:?}"))),
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic_prime(z: f64) -> f64 {
    let p = logistic(z);
    p * (1.0 - p)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn identity(z: f64) -> f64 {
    z
}

fn one(_: f64) -> f64 {
    1.0
}

fn half_square(z: f64) -> f64 {
    0.5 * z * z
}

/// Logistic link `mu(z) = 1 / (1 + e^-z)` for Bernoulli rewards, with `kappa`
/// evaluated over [`DEFAULT_RADIUS`]. Use [`MeanFunction::with_radius`] for the
/// radius of an actual problem.
pub fn logistic_mean() -> MeanFunction {
    let radius = DEFAULT_RADIUS;
    MeanFunction {
        name: "logistic",
        mu: logistic,
        mu_prime: logistic_prime,
        cumulant: softplus,
        kappa: logistic_prime(radius),
        l1: 0.25,
        l2: 1.0 / (6.0 * 3f64.sqrt()),
        radius,
    }
}

/// Identity link (Gaussian rewards). `mu'` is constant so `kappa = l1 = 1`.
pub fn linear_mean() -> MeanFunction {
    MeanFunction {
        name: "linear",
        mu: identity,
        mu_prime: one,
        cumulant: half_square,
        kappa: 1.0,
        l1: 1.0,
        l2: 0.0,
        radius: DEFAULT_RADIUS,
    }
}

/// Infimum of `mu_prime` over `[-radius, radius]`.
///
/// Dense grid scan with step `radius / 1000`, refined by golden-section search
/// on the two grid cells around the best grid point.
pub fn kappa_for_radius(mu_prime: fn(f64) -> f64, radius: f64) -> Result<f64> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius must be finite and >= 0, got {radius}")));
    }
    let best = if radius == 0.0 {
        mu_prime(0.0)
    } else {
        const CELLS: usize = 2000;
        let step = 2.0 * radius / CELLS as f64;
        let point = |k: usize| -radius + step * k as f64;
        let (mut arg, mut best) = (0, f64::INFINITY);
        for k in 0..=CELLS {
            let v = mu_prime(point(k));
            if v < best {
                best = v;
                arg = k;
            }
        }
        let lo = point(arg.saturating_sub(1));
        let hi = point((arg + 1).min(CELLS));
        best.min(golden_section_min(mu_prime, lo, hi, 1e-12 * radius.max(1.0)))
    };
    if !(best > 0.0 && best.is_finite()) {
        return Err(Error::Config(format!(
            "mean function derivative has infimum {best} on [-{radius}, {radius}]; kappa must be positive"
        )));
    }
    Ok(best)
}

fn golden_section_min(f: fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    fc.min(fd).min(f(a)).min(f(b))
}

/// The contexts of all `N` arms at one round, stored row-major (`N x dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContextSetRepr", into = "ContextSetRepr")]
pub struct ContextSet {
    n_arms: usize,
    dim: usize,
    data: Vec<f64>,
    round: usize,
}

#[derive(Serialize, Deserialize)]
struct ContextSetRepr {
    round: usize,
    contexts: Vec<Vec<f64>>,
}

impl TryFrom<ContextSetRepr> for ContextSet {
    type Error = Error;
    fn try_from(r: ContextSetRepr) -> Result<Self> {
        ContextSet::new(r.contexts, r.round)
    }
}

impl From<ContextSet> for ContextSetRepr {
    fn from(c: ContextSet) -> Self {
        ContextSetRepr {
            round: c.round,
            contexts: c.rows().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl ContextSet {
    /// Build from one vector per arm. Requires `N >= 2`, `dim >= 1`, equal
    /// dimensions, finite entries and `|x|_2 <= 1`.
    pub fn new(contexts: Vec<Vec<f64>>, round: usize) -> Result<Self> {
        let n_arms = contexts.len();
        let dim = contexts.first().map_or(0, Vec::len);
        if contexts.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidInput("contexts must all have the same dimension".into()));
        }
        Self::from_flat(n_arms, dim, contexts.concat(), round)
    }

    pub fn from_flat(n_arms: usize, dim: usize, data: Vec<f64>, round: usize) -> Result<Self> {
        if n_arms < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 arms, got {n_arms}")));
        }
        if dim == 0 {
            return Err(Error::InvalidInput("context dimension must be >= 1".into()));
        }
        if data.len() != n_arms * dim {
            return Err(Error::InvalidInput(format!(
                "expected {} context entries, got {}",
                n_arms * dim,
                data.len()
            )));
        }
        if round == 0 {
            return Err(Error::InvalidInput("round index is 1-based".into()));
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("context of arm {} is not finite", i + 1)));
            }
            let norm = norm(row);
            if norm > 1.0 + NORM_SLACK {
                return Err(Error::InvalidInput(format!(
                    "context of arm {} has norm {norm} > 1",
                    i + 1
                )));
            }
        }
        Ok(Self {
            n_arms,
            dim,
            data,
            round,
        })
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn round(&self) -> usize {
        self.round
    }

    #[inline]
    pub fn arm(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row-major `N x dim` view.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Linear predictors `x_i' beta` for every arm.
    pub fn predictors(&self, beta: &DVector<f64>) -> Vec<f64> {
        self.rows().map(|x| dot(x, beta.as_slice())).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Accumulate `sum_k w_k x_k x_k'` into the upper triangle of a row-major
/// `dim x dim` buffer.
fn accumulate_weighted_upper(rows: &[f64], dim: usize, weights: impl Iterator<Item = f64>, out: &mut [f64]) {
    for (x, w) in rows.chunks_exact(dim).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..dim {
            let wa = w * x[a];
            let row = &mut out[a * dim..(a + 1) * dim];
            for b in a..dim {
                row[b] += wa * x[b];
            }
        }
    }
}

fn symmetric_from_upper(dim: usize, upper: &[f64], ridge: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |r, c| {
        let v = if r <= c { upper[r * dim + c] } else { upper[c * dim + r] };
        if r == c {
            v + ridge
        } else {
            v
        }
    })
}

/// `sum_k w_k x_k x_k' + ridge * I` for row-major contexts.
pub fn weighted_gram(rows: &[f64], dim: usize, weights: impl Iterator<Item = f64>, ridge: f64) -> DMatrix<f64> {
    let mut upper = vec![0.0; dim * dim];
    accumulate_weighted_upper(rows, dim, weights, &mut upper);
    symmetric_from_upper(dim, &upper, ridge)
}

/// A symmetric positive-definite Gram matrix `sum w x x' + ridge * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    ridge: f64,
}

impl GramMatrix {
    /// The initial matrix `ridge * I`.
    pub fn new(dim: usize, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be positive, got {ridge}")));
        }
        Ok(Self {
            matrix: DMatrix::identity(dim, dim) * ridge,
            ridge,
        })
    }

    /// Recompute from scratch over a row-major context stack.
    pub fn from_stack(rows: &[f64], dim: usize, weights: &[f64], ridge: f64) -> Result<Self> {
        if rows.len() != weights.len() * dim {
            return Err(Error::InvalidInput("one weight per context row is required".into()));
        }
        check_weights(weights)?;
        let mut g = Self::new(dim, ridge)?;
        g.matrix = weighted_gram(rows, dim, weights.iter().copied(), ridge);
        Ok(g)
    }

    /// Reassemble from a stored matrix, validating symmetry and the ridge floor.
    pub fn from_parts(matrix: DMatrix<f64>, ridge: f64) -> Result<Self> {
        let g = Self { matrix, ridge };
        if !g.matrix.is_square() || !(ridge > 0.0) {
            return Err(Error::InvalidInput("Gram matrix must be square with positive ridge".into()));
        }
        let scale = g.matrix.amax().max(1.0);
        if (&g.matrix - g.matrix.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidInput("Gram matrix is not symmetric".into()));
        }
        if g.min_eigenvalue() < ridge * (1.0 - 1e-9) {
            return Err(Error::InvalidInput("Gram matrix eigenvalue below ridge".into()));
        }
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Add `sum_i w_i x_i x_i'` in place.
    pub fn add_weighted(&mut self, rows: &[f64], weights: &[f64]) -> Result<()> {
        let dim = self.dim();
        if rows.len() != weights.len() * dim {
            return Err(Error::InvalidInput("one weight per context row is required".into()));
        }
        check_weights(weights)?;
        let mut upper = vec![0.0; dim * dim];
        accumulate_weighted_upper(rows, dim, weights.iter().copied(), &mut upper);
        let delta = symmetric_from_upper(dim, &upper, 0.0);
        self.matrix += delta;
        Ok(())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.clone().symmetric_eigenvalues().min()
    }

    /// Lower-triangular `L` with `L L' = V^-1`.
    pub fn inverse_cholesky_factor(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))?;
        let mut inv = chol.inverse();
        inv = (&inv + inv.transpose()) * 0.5;
        let factor = inv
            .cholesky()
            .ok_or_else(|| Error::Numerical("inverse Gram matrix is not positive definite".into()))?;
        Ok(factor.l())
    }

    /// `x' V^-1 x`.
    pub fn inverse_quadratic_form(&self, x: &[f64]) -> Result<f64> {
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))?;
        let v = DVector::from_column_slice(x);
        let y = chol.solve(&v);
        Ok(v.dot(&y))
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    match weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        Some(w) => Err(Error::InvalidInput(format!("Gram weights must be finite and >= 0, got {w}"))),
        None => Ok(()),
    }
}

/// `g + sum_i w_i x_i x_i'` over the arms of one round.
pub fn gram_update(g: &GramMatrix, context_set: &ContextSet, weights: &[f64]) -> Result<GramMatrix> {
    if context_set.dim() != g.dim() {
        return Err(Error::InvalidInput("context dimension does not match Gram matrix".into()));
    }
    let mut out = g.clone();
    out.add_weighted(context_set.as_slice(), weights)?;
    Ok(out)
}

/// Newton solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Convergence threshold on the Euclidean norm of the score.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant for the backtracking line search.
    pub armijo: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            armijo: 1e-4,
        }
    }
}

/// Result of [`solve_ridge_glm`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub beta: DVector<f64>,
    pub iterations: usize,
    /// Score norm at `beta`.
    pub residual: f64,
    /// Penalized objective at the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
}

/// Euclidean norm of `sum_k {y_k - mu(x_k' beta)} x_k - lambda * beta`,
/// computed from scratch.
pub fn score_residual(
    mf: &MeanFunction,
    contexts: &[f64],
    dim: usize,
    targets: &[f64],
    lambda: f64,
    beta: &DVector<f64>,
) -> f64 {
    let mut score = -lambda * beta;
    for (x, y) in contexts.chunks_exact(dim).zip(targets) {
        let r = y - mf.mu(dot(x, beta.as_slice()));
        for (s, xi) in score.iter_mut().zip(x) {
            *s += r * xi;
        }
    }
    score.norm()
}

/// `sum_k {b(x_k' beta) - y_k x_k' beta} + (lambda / 2) |beta|^2`.
pub fn penalized_objective(
    mf: &MeanFunction,
    contexts: &[f64],
    dim: usize,
    targets: &[f64],
    lambda: f64,
    beta: &DVector<f64>,
) -> f64 {
    let eta: Vec<f64> = contexts.chunks_exact(dim).map(|x| dot(x, beta.as_slice())).collect();
    objective_at(mf, &eta, targets, lambda, beta)
}

fn objective_at(mf: &MeanFunction, eta: &[f64], targets: &[f64], lambda: f64, beta: &DVector<f64>) -> f64 {
    let loss: f64 = eta.iter().zip(targets).map(|(e, y)| mf.cumulant(*e) - y * e).sum();
    loss + 0.5 * lambda * beta.norm_squared()
}

fn predictors(contexts: &[f64], dim: usize, beta: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(contexts.chunks_exact(dim).map(|x| dot(x, beta)));
}

/// Solve the ridge-GLM score equation by globalized Newton.
///
/// `contexts` is row-major `n x dim`. Newton directions use the Hessian
/// `sum_k mu'(x_k' beta) x_k x_k' + lambda I`; step lengths are chosen by
/// halving until the Armijo condition holds on the penalized objective.
pub fn solve_ridge_glm(
    mf: &MeanFunction,
    contexts: &[f64],
    dim: usize,
    targets: &[f64],
    lambda: f64,
    init: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    let n = targets.len();
    if dim == 0 || contexts.len() != n * dim {
        return Err(Error::InvalidInput(format!(
            "context matrix has {} entries, expected {n} x {dim}",
            contexts.len()
        )));
    }
    if init.len() != dim {
        return Err(Error::InvalidInput(format!("initial point has length {}, expected {dim}", init.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge must be finite and >= 0, got {lambda}")));
    }
    if let Some(k) = targets.iter().position(|y| !y.is_finite()) {
        return Err(Error::InvalidInput(format!("target {k} is not finite")));
    }
    if let Some(k) = contexts.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("context row {} is not finite", k / dim)));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial point is not finite".into()));
    }

    let mut beta = init.clone();
    let mut eta = Vec::with_capacity(n);
    predictors(contexts, dim, beta.as_slice(), &mut eta);
    let mut objective = objective_at(mf, &eta, targets, lambda, &beta);
    let mut trace = vec![objective];
    let mut upper = vec![0.0; dim * dim];
    let mut trial_eta = Vec::with_capacity(n);
    let mut step_eta = Vec::with_capacity(n);

    let mut iterations = 0;
    loop {
        // Gradient of the objective, i.e. the negated score.
        let mut grad = lambda * &beta;
        for (x, (e, y)) in contexts.chunks_exact(dim).zip(eta.iter().zip(targets)) {
            let r = mf.mu(*e) - y;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        let residual = grad.norm();
        if residual <= cfg.tol {
            return Ok(Solution {
                beta,
                iterations,
                residual,
                objective_trace: trace,
            });
        }
        if iterations >= cfg.max_iter {
            return Err(Error::NonConvergence { iterations, residual });
        }
        iterations += 1;

        upper.iter_mut().for_each(|v| *v = 0.0);
        accumulate_weighted_upper(contexts, dim, eta.iter().map(|e| mf.mu_prime(*e)), &mut upper);
        let hessian = symmetric_from_upper(dim, &upper, lambda);
        let chol = hessian.cholesky().ok_or_else(|| {
            Error::Numerical("Newton Hessian is singular; use a positive ridge".into())
        })?;
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        predictors(contexts, dim, step.as_slice(), &mut step_eta);

        if slope.abs() <= 1e-10 * (1.0 + objective.abs()) {
            // The predicted decrease is below the rounding error of the
            // objective, so only the score can rank points: take the full
            // step while it still shrinks the score.
            let trial = &beta + &step;
            if score_residual(mf, contexts, dim, targets, lambda, &trial) < residual {
                beta = trial;
            } else {
                return Err(Error::NonConvergence { iterations, residual });
            }
        } else {
            let mut accepted = false;
            let mut alpha = 1.0;
            for _ in 0..60 {
                trial_eta.clear();
                trial_eta.extend(eta.iter().zip(&step_eta).map(|(e, s)| e + alpha * s));
                let trial = &beta + alpha * &step;
                let f = objective_at(mf, &trial_eta, targets, lambda, &trial);
                if f.is_finite() && f <= objective + cfg.armijo * alpha * slope {
                    beta = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(Error::NonConvergence { iterations, residual });
            }
        }
        predictors(contexts, dim, beta.as_slice(), &mut eta);
        objective = objective_at(mf, &eta, targets, lambda, &beta);
        trace.push(objective);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logistic_values() {
        let mf = logistic_mean();
        assert_eq!(mf.mu(0.0), 0.5);
        assert_eq!(mf.mu_prime(0.0), 0.25);
        for z in [-30.0, -3.0, -0.2, 0.7, 5.0, 40.0] {
            assert!(close(mf.mu(z) + mf.mu(-z), 1.0, 1e-15));
        }
        assert_eq!(mf.l1(), 0.25);
        assert!(close(mf.l2(), 0.0962250448649376, 1e-12));
    }

    #[test]
    fn mean_function_invariants() {
        let h = 1e-4;
        for mf in [logistic_mean().with_radius(3.0).unwrap(), linear_mean()] {
            let zs: Vec<f64> = (0..=200).map(|k| -10.0 + 0.1 * k as f64).collect();
            for w in zs.windows(2) {
                assert!(mf.mu(w[0]) <= mf.mu(w[1]));
            }
            for z in &zs {
                let fd = (mf.mu(z + h) - mf.mu(z - h)) / (2.0 * h);
                assert!((mf.mu_prime(*z) - fd).abs() <= 10.0 * h * h * mf.l2().max(1e-3));
                // b' = mu
                let fd_b = (mf.cumulant(z + h) - mf.cumulant(z - h)) / (2.0 * h);
                assert!((fd_b - mf.mu(*z)).abs() < 1e-7);
            }
            let r = mf.radius();
            for k in 0..=100 {
                let z = -r + 2.0 * r * k as f64 / 100.0;
                assert!(mf.kappa() <= mf.mu_prime(z) + 1e-15);
                assert!(mf.mu_prime(z) <= mf.l1());
            }
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_for_radius(logistic_prime, 0.0).unwrap(), 0.25);
        assert_eq!(kappa_for_radius(one, 5.0).unwrap(), 1.0);
        let expected = 2f64.exp() / (1.0 + 2f64.exp()).powi(2);
        assert!(close(kappa_for_radius(logistic_prime, 2.0).unwrap(), expected, 1e-12));
        assert!(close(expected, 0.10499, 1e-5));
    }

    #[test]
    fn kappa_rejects_vanishing_derivative() {
        fn zero(_: f64) -> f64 {
            0.0
        }
        assert!(matches!(kappa_for_radius(zero, 1.0), Err(Error::Config(_))));
        assert!(kappa_for_radius(logistic_prime, -1.0).is_err());
    }

    #[test]
    fn ridge_linear_closed_form() {
        let mf = linear_mean();
        let x = [1.0, 0.0, 0.0, 1.0];
        let sol = solve_ridge_glm(&mf, &x, 2, &[1.0, 2.0], 1.0, &DVector::zeros(2), &SolverConfig::default()).unwrap();
        assert!(close(sol.beta[0], 0.5, 1e-12) && close(sol.beta[1], 1.0, 1e-12));
        assert!(sol.residual <= 1e-8);
        assert!(score_residual(&mf, &x, 2, &[1.0, 2.0], 1.0, &sol.beta) <= 1e-8);
    }

    #[test]
    fn empty_data_gives_zero() {
        let sol = solve_ridge_glm(&logistic_mean(), &[], 3, &[], 1.0, &DVector::zeros(3), &SolverConfig::default()).unwrap();
        assert_eq!(sol.beta, DVector::zeros(3));
    }

    #[test]
    fn logistic_symmetric_pair_matches_scalar_root() {
        // 2(1 - mu(b)) = b, solved by bisection.
        let mf = logistic_mean();
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 2.0 * (1.0 - mf.mu(mid)) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = [1.0, 0.0, -1.0, 0.0];
        let sol = solve_ridge_glm(&mf, &x, 2, &[1.0, 0.0], 1.0, &DVector::zeros(2), &SolverConfig::default()).unwrap();
        assert!(close(sol.beta[0], lo, 1e-9), "{} vs {lo}", sol.beta[0]);
        assert!(close(sol.beta[1], 0.0, 1e-12));
    }

    #[test]
    fn solver_input_errors() {
        let mf = logistic_mean();
        let cfg = SolverConfig::default();
        let z = DVector::zeros(1);
        assert!(matches!(
            solve_ridge_glm(&mf, &[1.0], 1, &[f64::NAN], 1.0, &z, &cfg),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            solve_ridge_glm(&mf, &[f64::INFINITY], 1, &[1.0], 1.0, &z, &cfg),
            Err(Error::InvalidInput(_))
        ));
        let tight = SolverConfig { max_iter: 1, tol: 1e-14, ..cfg };
        match solve_ridge_glm(&mf, &[1.0, 0.5], 1, &[1.0, 0.0], 1e-3, &z, &tight) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn objective_trace_is_non_increasing() {
        let mf = logistic_mean();
        let x = [0.9, 0.1, -0.3, 0.8, 0.5, -0.5, 0.2, 0.2];
        let y = [3.0, -1.5, 0.4, 1.0];
        let sol = solve_ridge_glm(&mf, &x, 2, &y, 0.1, &DVector::from_vec(vec![5.0, -5.0]), &SolverConfig::default()).unwrap();
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn gram_examples() {
        let g = GramMatrix::new(3, 1.0).unwrap();
        assert_eq!(g.matrix(), &DMatrix::identity(3, 3));
        let cs = ContextSet::new(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]], 1).unwrap();
        let g2 = gram_update(&g, &cs, &[0.25, 0.0]).unwrap();
        assert_eq!(g2.matrix(), &DMatrix::from_diagonal(&DVector::from_vec(vec![1.25, 1.0, 1.0])));
        assert!(gram_update(&g, &cs, &[-0.1, 0.0]).is_err());
        let mut g3 = g.clone();
        g3.add_weighted(&[], &[]).unwrap();
        assert_eq!(g3, g);
    }

    #[test]
    fn context_set_validation() {
        assert!(ContextSet::new(vec![vec![1.0, 1.0], vec![0.0, 0.0]], 1).is_err());
        assert!(ContextSet::new(vec![vec![0.5]], 1).is_err());
        assert!(ContextSet::new(vec![vec![0.5], vec![0.1, 0.1]], 1).is_err());
        assert!(ContextSet::new(vec![vec![0.5], vec![0.1]], 0).is_err());
        let cs = ContextSet::new(vec![vec![0.6, 0.8], vec![0.0, -1.0]], 4).unwrap();
        assert_eq!(cs.arm(1), &[0.0, -1.0]);
        let json = serde_json::to_string(&cs).unwrap();
        assert_eq!(serde_json::from_str::<ContextSet>(&json).unwrap(), cs);
    }

    #[test]
    fn inverse_cholesky_factor_reproduces_inverse() {
        let mut g = GramMatrix::new(2, 0.5).unwrap();
        g.add_weighted(&[0.6, 0.8, 1.0, 0.0], &[2.0, 0.3]).unwrap();
        let l = g.inverse_cholesky_factor().unwrap();
        let prod = g.matrix() * (&l * l.transpose());
        assert!((prod - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        let q = g.inverse_quadratic_form(&[0.6, 0.8]).unwrap();
        let x = DVector::from_vec(vec![0.6, 0.8]);
        assert!(close(q, (x.transpose() * &l * l.transpose() * &x)[0], 1e-12));
    }
}
