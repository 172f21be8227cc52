//! Arm-selection policies behind the [`Policy`] trait.
//!
//! [`DdrtsGlm`] is the double doubly-robust Thompson sampler: per-arm Gaussian
//! draws around the DDR estimate, Monte-Carlo selection probabilities,
//! resampling of low-probability candidates and floored logging
//! probabilities. [`GlmUcb`], [`TsGlm`] and [`UniformRandom`] are baselines
//! fitted on selected-arm data only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorState, GramMode, History, RoundRecord};
use crate::glm::{argmax, dot, solve_ridge_glm, ContextSet, GramMatrix, MeanFunction, SolverConfig};

/// Smallest Monte-Carlo batch accepted for selection probabilities.
pub const MIN_MC_SAMPLES: usize = 100;

/// Settings of [`DdrtsGlm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    /// Scale of the sampling covariance `v^2 V^-1`.
    pub v: f64,
    pub lambda: f64,
    /// Resampling threshold, in `[1/(N+1), 1/N)`.
    pub gamma: f64,
    /// Confidence level entering the resampling cap `M_t`.
    pub delta: f64,
    pub s_bound: f64,
    pub mc_samples: usize,
    pub solver: SolverConfig,
    pub gram_mode: GramMode,
    pub update_every: usize,
}

impl PolicyConfig {
    /// Defaults for `n_arms` arms in dimension `dim`: `gamma = 1/(N+1)`,
    /// `lambda = 1`, `delta = 0.1`, `S = 2 sqrt(d)` and 1000 Monte-Carlo draws.
    pub fn new(v: f64, n_arms: usize, dim: usize) -> Self {
        Self {
            v,
            lambda: 1.0,
            gamma: 1.0 / (n_arms as f64 + 1.0),
            delta: 0.1,
            s_bound: 2.0 * (dim as f64).sqrt(),
            mc_samples: 1000,
            solver: SolverConfig::default(),
            gram_mode: GramMode::Exact,
            update_every: 1,
        }
    }

    pub fn validate(&self, n_arms: usize) -> Result<()> {
        check_gamma(n_arms, self.gamma)?;
        if !(self.v >= 0.0 && self.v.is_finite()) {
            return Err(Error::Config(format!("v must be finite and >= 0, got {}", self.v)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.s_bound > 0.0) {
            return Err(Error::Config(format!("S must be positive, got {}", self.s_bound)));
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::Config(format!(
                "mc_samples must be >= {MIN_MC_SAMPLES}, got {}",
                self.mc_samples
            )));
        }
        if self.update_every == 0 {
            return Err(Error::Config("update_every must be >= 1".into()));
        }
        Ok(())
    }

    fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            ridge: self.lambda,
            bound_s: self.s_bound,
            solver: self.solver,
            gram_mode: self.gram_mode,
            update_every: self.update_every,
        }
    }
}

fn check_gamma(n_arms: usize, gamma: f64) -> Result<()> {
    let n = n_arms as f64;
    // 1/(N+1) itself must pass despite rounding in the caller's division.
    let lower_ok = gamma * (n + 1.0) >= 1.0 - 1e-12;
    if n_arms < 1 || !lower_ok || !(gamma * n < 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in [1/(N+1), 1/N) = [{}, {}), got {gamma}",
            1.0 / (n + 1.0),
            1.0 / n
        )));
    }
    Ok(())
}

/// Closed-form exploration scale and resampling cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub v: f64,
    pub m_t: usize,
}

/// `v = (kappa / L1) {2 log(N / (1 - gamma N))}^(-1/2)` and
/// `M_t = ceil(log(t^2 / delta) / log(1 / (1 - gamma)))`.
pub fn ddrts_hyperparams(n_arms: usize, gamma: f64, delta: f64, t: usize, mf: &MeanFunction) -> Result<Hyperparams> {
    check_gamma(n_arms, gamma)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if t == 0 {
        return Err(Error::Config("round index is 1-based".into()));
    }
    let n = n_arms as f64;
    let v = (mf.kappa() / mf.l1()) / (2.0 * (n / (1.0 - gamma * n)).ln()).sqrt();
    Ok(Hyperparams {
        v,
        m_t: resampling_cap(gamma, delta, t),
    })
}

fn resampling_cap(gamma: f64, delta: f64, t: usize) -> usize {
    let t = t as f64;
    ((t * t / delta).ln() / (1.0 / (1.0 - gamma)).ln()).ceil().max(0.0) as usize
}

/// Raw Monte-Carlo selection probabilities and their floored adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionProbabilities {
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub epsilon: f64,
}

/// Floor the raw probabilities: arms with `raw > gamma` get `gamma + eps`, the
/// rest `gamma / 2`, with `eps` chosen so that the result sums to one.
pub fn adjust_probs(raw: &[f64], gamma: f64) -> Result<SelectionProbabilities> {
    let n = raw.len();
    check_gamma(n, gamma)?;
    let sum: f64 = raw.iter().sum();
    if raw.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("raw probabilities must form a distribution: {raw:?}")));
    }
    let k = raw.iter().filter(|p| **p > gamma).count();
    if k == 0 {
        // max raw >= 1/N > gamma whenever raw sums to one.
        return Err(Error::Internal(format!("no arm exceeds gamma = {gamma}: {raw:?}")));
    }
    let (n, kf) = (n as f64, k as f64);
    let epsilon = (1.0 - (n - kf) * gamma / 2.0 - kf * gamma) / kf;
    let adjusted = raw
        .iter()
        .map(|p| if *p > gamma { gamma + epsilon } else { gamma / 2.0 })
        .collect();
    Ok(SelectionProbabilities {
        raw: raw.to_vec(),
        adjusted,
        epsilon,
    })
}

fn uniform_probabilities(n_arms: usize, gamma: f64) -> SelectionProbabilities {
    let p = 1.0 / n_arms as f64;
    SelectionProbabilities {
        raw: vec![p; n_arms],
        adjusted: vec![p; n_arms],
        epsilon: p - gamma,
    }
}

/// `n` independent draws from `N(mean, v^2 L L')`.
pub fn draw_parameters(
    mean: &DVector<f64>,
    cov_factor: &DMatrix<f64>,
    v: f64,
    n: usize,
    rng: &mut dyn RngCore,
) -> Vec<DVector<f64>> {
    let d = mean.len();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            mean + v * (cov_factor * z)
        })
        .collect()
}

/// Output of [`sample_candidates`].
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub sampled_rewards: Vec<f64>,
    pub candidate: usize,
}

/// Draw one parameter per arm from `N(estimator, v^2 V^-1)` and return the
/// sampled mean rewards with their argmax (lowest index on ties).
pub fn sample_candidates(
    estimator: &DVector<f64>,
    gram: &GramMatrix,
    context_set: &ContextSet,
    v: f64,
    mf: &MeanFunction,
    rng: &mut dyn RngCore,
) -> Result<Candidates> {
    let factor = if v > 0.0 {
        gram.inverse_cholesky_factor()?
    } else {
        DMatrix::zeros(estimator.len(), estimator.len())
    };
    let draws = draw_parameters(estimator, &factor, v, context_set.n_arms(), rng);
    let sampled_rewards: Vec<f64> = context_set
        .rows()
        .zip(&draws)
        .map(|(x, b)| mf.mu(dot(x, b.as_slice())))
        .collect();
    let candidate = argmax(&sampled_rewards);
    Ok(Candidates {
        sampled_rewards,
        candidate,
    })
}

/// Source of Thompson-sampling candidates and their selection probabilities.
pub trait CandidateSampler {
    fn n_arms(&self) -> usize;

    /// Argmax arm of one fresh joint draw.
    fn draw_candidate(&mut self, rng: &mut dyn RngCore) -> usize;

    /// Frequency of each arm being the argmax over `mc_samples` fresh draws.
    fn estimate_probs(&mut self, mc_samples: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_arms()];
        for _ in 0..mc_samples {
            counts[self.draw_candidate(rng)] += 1;
        }
        counts.iter().map(|c| *c as f64 / mc_samples as f64).collect()
    }
}

/// Per-arm Gaussian sampler around a fixed estimate.
///
/// Only `x_i' beta_i` is needed, so each draw `beta + v L z` is reduced to
/// `x_i' beta + v (L' x_i)' z` with `L L' = V^-1`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    means: Vec<f64>,
    loadings: Vec<f64>,
    dim: usize,
    z: Vec<f64>,
    scores: Vec<f64>,
}

impl GaussianSampler {
    pub fn new(estimator: &DVector<f64>, gram: &GramMatrix, context_set: &ContextSet, v: f64) -> Result<Self> {
        let dim = context_set.dim();
        if estimator.len() != dim || gram.dim() != dim {
            return Err(Error::InvalidInput("estimator, Gram matrix and contexts disagree on dimension".into()));
        }
        let means = context_set.predictors(estimator);
        let loadings = if v > 0.0 {
            let factor = gram.inverse_cholesky_factor()?;
            context_set
                .rows()
                .flat_map(|x| {
                    let x = DVector::from_column_slice(x);
                    (factor.tr_mul(&x) * v).as_slice().to_vec()
                })
                .collect()
        } else {
            vec![0.0; context_set.n_arms() * dim]
        };
        Ok(Self {
            scores: vec![0.0; means.len()],
            means,
            loadings,
            dim,
            z: vec![0.0; dim],
        })
    }
}

impl CandidateSampler for GaussianSampler {
    fn n_arms(&self) -> usize {
        self.means.len()
    }

    fn draw_candidate(&mut self, rng: &mut dyn RngCore) -> usize {
        for (i, score) in self.scores.iter_mut().enumerate() {
            for z in self.z.iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            let w = &self.loadings[i * self.dim..(i + 1) * self.dim];
            *score = self.means[i] + dot(w, &self.z);
        }
        argmax(&self.scores)
    }
}

/// Monte-Carlo selection probabilities from one batch of `mc_samples` draws.
pub fn estimate_selection_probs(
    estimator: &DVector<f64>,
    gram: &GramMatrix,
    context_set: &ContextSet,
    v: f64,
    mc_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if mc_samples == 0 {
        return Err(Error::Config("mc_samples must be positive".into()));
    }
    let mut sampler = GaussianSampler::new(estimator, gram, context_set, v)?;
    Ok(sampler.estimate_probs(mc_samples, rng))
}

/// Arm played by [`ddrts_select`].
#[derive(Debug, Clone, PartialEq)]
pub struct DdrtsChoice {
    pub arm: usize,
    pub probs: SelectionProbabilities,
    pub resamples: usize,
}

/// Resampling loop of the DDR Thompson sampler over an arbitrary sampler.
///
/// A candidate whose estimated probability is at most `gamma` is redrawn while
/// fewer than `m_t` redraws have happened; afterwards the last candidate is
/// played. Probabilities are re-estimated with a fresh batch per attempt.
pub fn ddrts_select_with(
    sampler: &mut dyn CandidateSampler,
    gamma: f64,
    m_t: usize,
    mc_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<DdrtsChoice> {
    let mut n = 1;
    loop {
        let candidate = sampler.draw_candidate(rng);
        let raw = sampler.estimate_probs(mc_samples, rng);
        if raw[candidate] <= gamma && n <= m_t {
            n += 1;
            continue;
        }
        return Ok(DdrtsChoice {
            arm: candidate,
            probs: adjust_probs(&raw, gamma)?,
            resamples: n - 1,
        });
    }
}

/// One DDR Thompson-sampling decision at round `t >= 2`.
pub fn ddrts_select(
    state: &EstimatorState,
    context_set: &ContextSet,
    cfg: &PolicyConfig,
    t: usize,
    mf: &MeanFunction,
    rng: &mut dyn RngCore,
) -> Result<DdrtsChoice> {
    if t < 2 {
        return Err(Error::InvalidInput("round 1 is played uniformly at random".into()));
    }
    cfg.validate(context_set.n_arms())?;
    let hyper = ddrts_hyperparams(context_set.n_arms(), cfg.gamma, cfg.delta, t, mf)?;
    let mut sampler = GaussianSampler::new(&state.ddr, &state.gram, context_set, cfg.v)?;
    ddrts_select_with(&mut sampler, cfg.gamma, hyper.m_t, cfg.mc_samples, rng)
}

/// A decision returned by a [`Policy`]. `arm` is 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub arm: usize,
    pub probs: Option<SelectionProbabilities>,
    pub resamples: usize,
}

impl Decision {
    fn plain(arm: usize) -> Self {
        Self {
            arm,
            probs: None,
            resamples: 0,
        }
    }
}

/// A sequential arm-selection policy.
///
/// `select` is called once per round; `observe` only for rounds whose reward
/// is revealed (all of them in simulation, the matched ones in replay).
pub trait Policy: Send {
    fn name(&self) -> &str;

    fn select(&mut self, contexts: &ContextSet, rng: &mut dyn RngCore) -> Result<Decision>;

    fn observe(&mut self, contexts: &ContextSet, decision: &Decision, reward: f64) -> Result<()>;

    /// Current parameter estimate, when the policy keeps one.
    fn estimate(&self) -> Option<&DVector<f64>> {
        None
    }

    /// Whether the run used an approximation worth flagging in outputs.
    fn approximations(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Double doubly-robust Thompson sampling for generalized linear bandits.
#[derive(Debug, Clone)]
pub struct DdrtsGlm {
    cfg: PolicyConfig,
    mf: MeanFunction,
    history: History,
    state: EstimatorState,
}

impl DdrtsGlm {
    pub fn new(cfg: PolicyConfig, n_arms: usize, dim: usize, mf: MeanFunction) -> Result<Self> {
        cfg.validate(n_arms)?;
        Ok(Self {
            history: History::new(n_arms, dim, 1.0).with_probability_floor(cfg.gamma / 2.0 * (1.0 - 1e-12)),
            state: EstimatorState::new(dim, cfg.lambda, cfg.s_bound)?,
            cfg,
            mf,
        })
    }

    /// Accept rewards with `|Y| <= bound` (default 1).
    pub fn with_reward_bound(mut self, bound: f64) -> Self {
        let floor = self.cfg.gamma / 2.0 * (1.0 - 1e-12);
        self.history = History::new(self.history.n_arms(), self.history.dim(), bound).with_probability_floor(floor);
        self
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }
}

impl Policy for DdrtsGlm {
    fn name(&self) -> &str {
        "ddrts"
    }

    fn select(&mut self, contexts: &ContextSet, rng: &mut dyn RngCore) -> Result<Decision> {
        let t = self.history.len() + 1;
        let n = contexts.n_arms();
        if t == 1 {
            return Ok(Decision {
                arm: uniform_random_arm(n, rng),
                probs: Some(uniform_probabilities(n, self.cfg.gamma)),
                resamples: 0,
            });
        }
        let choice = ddrts_select(&self.state, contexts, &self.cfg, t, &self.mf, rng).map_err(|e| e.at_round(t))?;
        Ok(Decision {
            arm: choice.arm,
            probs: Some(choice.probs),
            resamples: choice.resamples,
        })
    }

    fn observe(&mut self, contexts: &ContextSet, decision: &Decision, reward: f64) -> Result<()> {
        let probs = decision
            .probs
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("DDRTS-GLM needs the selection probabilities it logged".into()))?;
        self.history.push(RoundRecord {
            context_set: contexts.clone(),
            chosen_arm: decision.arm,
            reward,
            selection_probs: probs.adjusted.clone(),
        })?;
        if self.history.len() >= 2 {
            self.state
                .update(&self.history, &self.mf, &self.cfg.estimator_config())
                .map_err(|e| e.at_round(self.history.len()))?;
        }
        Ok(())
    }

    fn estimate(&self) -> Option<&DVector<f64>> {
        Some(&self.state.ddr)
    }

    fn approximations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cfg.gram_mode == GramMode::FrozenWeight {
            out.push("frozen_weight_gram".to_string());
        }
        if self.cfg.update_every > 1 {
            out.push(format!("update_every_{}", self.cfg.update_every));
        }
        out
    }
}

/// Ridge-GLM fit on selected-arm data with the unit-weight design matrix
/// `A_t = sum x x' + lambda I`, shared by the GLM-UCB and TS(GLM) baselines.
#[derive(Debug, Clone)]
struct SelectedFit {
    mf: MeanFunction,
    lambda: f64,
    solver: SolverConfig,
    dim: usize,
    contexts: Vec<f64>,
    rewards: Vec<f64>,
    design: GramMatrix,
    beta: DVector<f64>,
    fitted: usize,
}

impl SelectedFit {
    fn new(dim: usize, lambda: f64, mf: MeanFunction, solver: SolverConfig) -> Result<Self> {
        Ok(Self {
            mf,
            lambda,
            solver,
            dim,
            contexts: Vec::new(),
            rewards: Vec::new(),
            design: GramMatrix::new(dim, lambda)?,
            beta: DVector::zeros(dim),
            fitted: 0,
        })
    }

    fn from_history(history: &History, lambda: f64, mf: MeanFunction, solver: SolverConfig) -> Result<Self> {
        let mut fit = Self::new(history.dim(), lambda, mf, solver)?;
        for (x, y) in history.selected_contexts().chunks_exact(history.dim()).zip(history.rewards()) {
            fit.push(x, *y)?;
        }
        Ok(fit)
    }

    fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.contexts.extend_from_slice(x);
        self.rewards.push(y);
        self.design.add_weighted(x, &[1.0])
    }

    fn refit(&mut self) -> Result<&DVector<f64>> {
        if self.fitted != self.rewards.len() {
            let sol = solve_ridge_glm(
                &self.mf,
                &self.contexts,
                self.dim,
                &self.rewards,
                self.lambda,
                &self.beta,
                &self.solver,
            )
            .map_err(|e| e.at_round(self.rewards.len()))?;
            self.beta = sol.beta;
            self.fitted = self.rewards.len();
        }
        Ok(&self.beta)
    }
}

/// `mu(x_i' beta) + alpha |x_i|_{A^-1}` for every arm.
pub fn ucb_scores(
    beta: &DVector<f64>,
    design: &GramMatrix,
    context_set: &ContextSet,
    alpha: f64,
    mf: &MeanFunction,
) -> Result<Vec<f64>> {
    let chol = design
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("design matrix is not positive definite".into()))?;
    Ok(context_set
        .rows()
        .map(|x| {
            let v = DVector::from_column_slice(x);
            let width = v.dot(&chol.solve(&v)).max(0.0).sqrt();
            mf.mu(dot(x, beta.as_slice())) + alpha * width
        })
        .collect())
}

/// GLM-UCB decision from a history of selected arms (`A_t = sum x x' + I`).
pub fn glm_ucb_select(
    history: &History,
    context_set: &ContextSet,
    alpha: f64,
    mf: &MeanFunction,
    solver: &SolverConfig,
) -> Result<usize> {
    let mut fit = SelectedFit::from_history(history, 1.0, *mf, *solver)?;
    let beta = fit.refit()?.clone();
    Ok(argmax(&ucb_scores(&beta, &fit.design, context_set, alpha, mf)?))
}

fn ts_scores(
    beta: &DVector<f64>,
    design: &GramMatrix,
    context_set: &ContextSet,
    v: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let sampled = if v > 0.0 {
        let factor = design.inverse_cholesky_factor()?;
        draw_parameters(beta, &factor, v, 1, rng).remove(0)
    } else {
        beta.clone()
    };
    Ok(context_set.predictors(&sampled))
}

/// TS(GLM) decision: one shared draw `N(beta_hat, v^2 A_t^-1)`, greedy on it.
pub fn ts_glm_select(
    history: &History,
    context_set: &ContextSet,
    v: f64,
    mf: &MeanFunction,
    solver: &SolverConfig,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    let mut fit = SelectedFit::from_history(history, 1.0, *mf, *solver)?;
    let beta = fit.refit()?.clone();
    Ok(argmax(&ts_scores(&beta, &fit.design, context_set, v, rng)?))
}

/// GLM-UCB baseline, refitted every round with warm starts.
#[derive(Debug, Clone)]
pub struct GlmUcb {
    alpha: f64,
    fit: SelectedFit,
}

impl GlmUcb {
    pub fn new(alpha: f64, lambda: f64, dim: usize, mf: MeanFunction, solver: SolverConfig) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self {
            alpha,
            fit: SelectedFit::new(dim, lambda, mf, solver)?,
        })
    }
}

impl Policy for GlmUcb {
    fn name(&self) -> &str {
        "glm_ucb"
    }

    fn select(&mut self, contexts: &ContextSet, _rng: &mut dyn RngCore) -> Result<Decision> {
        let beta = self.fit.refit()?.clone();
        let scores = ucb_scores(&beta, &self.fit.design, contexts, self.alpha, &self.fit.mf)?;
        Ok(Decision::plain(argmax(&scores)))
    }

    fn observe(&mut self, contexts: &ContextSet, decision: &Decision, reward: f64) -> Result<()> {
        self.fit.push(contexts.arm(decision.arm), reward)
    }

    fn estimate(&self) -> Option<&DVector<f64>> {
        Some(&self.fit.beta)
    }
}

/// Thompson sampling for GLMs with a single shared parameter draw.
#[derive(Debug, Clone)]
pub struct TsGlm {
    v: f64,
    fit: SelectedFit,
}

impl TsGlm {
    pub fn new(v: f64, lambda: f64, dim: usize, mf: MeanFunction, solver: SolverConfig) -> Result<Self> {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("v must be finite and >= 0, got {v}")));
        }
        Ok(Self {
            v,
            fit: SelectedFit::new(dim, lambda, mf, solver)?,
        })
    }
}

impl Policy for TsGlm {
    fn name(&self) -> &str {
        "ts_glm"
    }

    fn select(&mut self, contexts: &ContextSet, rng: &mut dyn RngCore) -> Result<Decision> {
        let beta = self.fit.refit()?.clone();
        let scores = ts_scores(&beta, &self.fit.design, contexts, self.v, rng)?;
        Ok(Decision::plain(argmax(&scores)))
    }

    fn observe(&mut self, contexts: &ContextSet, decision: &Decision, reward: f64) -> Result<()> {
        self.fit.push(contexts.arm(decision.arm), reward)
    }

    fn estimate(&self) -> Option<&DVector<f64>> {
        Some(&self.fit.beta)
    }
}

/// Uniform draw from `0..n_arms`.
pub fn uniform_random_arm(n_arms: usize, rng: &mut dyn RngCore) -> usize {
    rng.random_range(0..n_arms)
}

pub fn uniform_random_select(context_set: &ContextSet, rng: &mut dyn RngCore) -> usize {
    uniform_random_arm(context_set.n_arms(), rng)
}

#[derive(Debug, Clone, Default)]
pub struct UniformRandom;

impl Policy for UniformRandom {
    fn name(&self) -> &str {
        "uniform"
    }

    fn select(&mut self, contexts: &ContextSet, rng: &mut dyn RngCore) -> Result<Decision> {
        let n = contexts.n_arms();
        let p = 1.0 / n as f64;
        Ok(Decision {
            arm: uniform_random_select(contexts, rng),
            probs: Some(SelectionProbabilities {
                raw: vec![p; n],
                adjusted: vec![p; n],
                epsilon: 0.0,
            }),
            resamples: 0,
        })
    }

    fn observe(&mut self, _: &ContextSet, _: &Decision, _: f64) -> Result<()> {
        Ok(())
    }
}

/// Greedy with respect to a fixed parameter; with the true parameter this is
/// the regret-free oracle.
#[derive(Debug, Clone)]
pub struct Greedy {
    beta: DVector<f64>,
}

impl Greedy {
    pub fn new(beta: DVector<f64>) -> Self {
        Self { beta }
    }
}

impl Policy for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn select(&mut self, contexts: &ContextSet, _rng: &mut dyn RngCore) -> Result<Decision> {
        Ok(Decision::plain(argmax(&contexts.predictors(&self.beta))))
    }

    fn observe(&mut self, _: &ContextSet, _: &Decision, _: f64) -> Result<()> {
        Ok(())
    }

    fn estimate(&self) -> Option<&DVector<f64>> {
        Some(&self.beta)
    }
}

/// Plays a fixed sequence of arms, one per `select` call.
#[derive(Debug, Clone)]
pub struct Scripted {
    arms: Vec<usize>,
    next: usize,
}

impl Scripted {
    pub fn new(arms: Vec<usize>) -> Self {
        Self { arms, next: 0 }
    }
}

impl Policy for Scripted {
    fn name(&self) -> &str {
        "logged"
    }

    fn select(&mut self, contexts: &ContextSet, _rng: &mut dyn RngCore) -> Result<Decision> {
        let arm = *self
            .arms
            .get(self.next)
            .ok_or_else(|| Error::InvalidInput("scripted policy ran out of arms".into()))?;
        if arm >= contexts.n_arms() {
            return Err(Error::InvalidInput(format!("scripted arm {arm} out of range")));
        }
        self.next += 1;
        Ok(Decision::plain(arm))
    }

    fn observe(&mut self, _: &ContextSet, _: &Decision, _: f64) -> Result<()> {
        Ok(())
    }
}

/// Serializable description of a policy, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Ddrts {
        #[serde(default = "default_exploration")]
        v: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
        /// Defaults to `1/(N+1)`.
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default = "default_delta")]
        delta: f64,
        /// Defaults to `2 sqrt(d)`.
        #[serde(default)]
        s_bound: Option<f64>,
        #[serde(default = "default_mc_samples")]
        mc_samples: usize,
        #[serde(default)]
        gram_mode: GramMode,
        #[serde(default = "default_update_every")]
        update_every: usize,
        #[serde(default)]
        solver: SolverConfig,
    },
    GlmUcb {
        #[serde(default = "default_exploration")]
        alpha: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        solver: SolverConfig,
    },
    TsGlm {
        #[serde(default = "default_exploration")]
        v: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        solver: SolverConfig,
    },
    Uniform,
}

fn default_exploration() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.1
}
fn default_mc_samples() -> usize {
    1000
}
fn default_update_every() -> usize {
    1
}

impl PolicySpec {
    /// DDRTS-GLM with every setting at its default.
    pub fn ddrts(v: f64) -> Self {
        PolicySpec::Ddrts {
            v,
            lambda: default_lambda(),
            gamma: None,
            delta: default_delta(),
            s_bound: None,
            mc_samples: default_mc_samples(),
            gram_mode: GramMode::Exact,
            update_every: 1,
            solver: SolverConfig::default(),
        }
    }

    pub fn glm_ucb(alpha: f64) -> Self {
        PolicySpec::GlmUcb {
            alpha,
            lambda: default_lambda(),
            solver: SolverConfig::default(),
        }
    }

    pub fn ts_glm(v: f64) -> Self {
        PolicySpec::TsGlm {
            v,
            lambda: default_lambda(),
            solver: SolverConfig::default(),
        }
    }

    /// Short label: `ddrts`, `glm_ucb`, `ts_glm` or `uniform`.
    pub fn label(&self) -> &'static str {
        match self {
            PolicySpec::Ddrts { .. } => "ddrts",
            PolicySpec::GlmUcb { .. } => "glm_ucb",
            PolicySpec::TsGlm { .. } => "ts_glm",
            PolicySpec::Uniform => "uniform",
        }
    }

    /// The tuned exploration parameter (`v` or `alpha`), if any.
    pub fn exploration(&self) -> Option<f64> {
        match self {
            PolicySpec::Ddrts { v, .. } | PolicySpec::TsGlm { v, .. } => Some(*v),
            PolicySpec::GlmUcb { alpha, .. } => Some(*alpha),
            PolicySpec::Uniform => None,
        }
    }

    /// Copy with the exploration parameter replaced.
    pub fn with_exploration(&self, value: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            PolicySpec::Ddrts { v, .. } | PolicySpec::TsGlm { v, .. } => *v = value,
            PolicySpec::GlmUcb { alpha, .. } => *alpha = value,
            PolicySpec::Uniform => {}
        }
        out
    }

    pub fn build(&self, n_arms: usize, dim: usize, mf: MeanFunction) -> Result<Box<dyn Policy>> {
        Ok(match self {
            PolicySpec::Ddrts {
                v,
                lambda,
                gamma,
                delta,
                s_bound,
                mc_samples,
                gram_mode,
                update_every,
                solver,
            } => {
                let mut cfg = PolicyConfig::new(*v, n_arms, dim);
                cfg.lambda = *lambda;
                cfg.gamma = gamma.unwrap_or(cfg.gamma);
                cfg.delta = *delta;
                cfg.s_bound = s_bound.unwrap_or(cfg.s_bound);
                cfg.mc_samples = *mc_samples;
                cfg.gram_mode = *gram_mode;
                cfg.update_every = *update_every;
                cfg.solver = *solver;
                Box::new(DdrtsGlm::new(cfg, n_arms, dim, mf)?)
            }
            PolicySpec::GlmUcb { alpha, lambda, solver } => Box::new(GlmUcb::new(*alpha, *lambda, dim, mf, *solver)?),
            PolicySpec::TsGlm { v, lambda, solver } => Box::new(TsGlm::new(*v, *lambda, dim, mf, *solver)?),
            PolicySpec::Uniform => Box::new(UniformRandom),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{linear_mean, logistic_mean};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn hyperparams_examples() {
        let mf = logistic_mean();
        let h = ddrts_hyperparams(10, 1.0 / 11.0, 0.1, 100, &mf).unwrap();
        let scale = 1.0 / (2.0 * 110f64.ln()).sqrt();
        assert!((h.v - scale * mf.kappa() / mf.l1()).abs() < 1e-12);
        assert!((scale - 0.326147).abs() < 1e-6);
        assert_eq!(h.m_t, 121);
        assert!(matches!(ddrts_hyperparams(10, 0.1, 0.1, 100, &mf), Err(Error::Config(_))));
        assert!(ddrts_hyperparams(10, 0.05, 0.1, 100, &mf).is_err());
        assert!(ddrts_hyperparams(10, 1.0 / 11.0, 1.0, 100, &mf).is_err());
    }

    #[test]
    fn adjust_examples() {
        let p = adjust_probs(&[0.6, 0.3, 0.1], 0.25).unwrap();
        assert!((p.epsilon - 0.1875).abs() < 1e-15);
        assert_eq!(p.adjusted, vec![0.4375, 0.4375, 0.125]);

        let p = adjust_probs(&[0.9, 0.1], 1.0 / 3.0).unwrap();
        assert!((p.epsilon - 0.5).abs() < 1e-15);
        assert!((p.adjusted[0] - 5.0 / 6.0).abs() < 1e-15 && (p.adjusted[1] - 1.0 / 6.0).abs() < 1e-15);

        let p = adjust_probs(&[0.25; 4], 0.2).unwrap();
        for a in p.adjusted {
            assert!((a - 0.25).abs() < 1e-15);
        }
        assert!(adjust_probs(&[0.5, 0.6], 0.4).is_err());
        assert!(adjust_probs(&[0.5, 0.5], 0.5).is_err());
    }

    #[test]
    fn degenerate_covariance_is_greedy() {
        let cs = ContextSet::new(vec![vec![0.1, 0.0], vec![0.5, 0.5], vec![-0.9, 0.0]], 3).unwrap();
        let beta = DVector::from_vec(vec![1.0, 0.2]);
        let gram = GramMatrix::new(2, 1.0).unwrap();
        let mf = logistic_mean();
        let c = sample_candidates(&beta, &gram, &cs, 0.0, &mf, &mut rng(1)).unwrap();
        assert_eq!(c.candidate, 1);
        let probs = estimate_selection_probs(&beta, &gram, &cs, 0.0, 200, &mut rng(2)).unwrap();
        assert_eq!(probs, vec![0.0, 1.0, 0.0]);

        let mut state = EstimatorState::new(2, 1.0, 4.0).unwrap();
        state.ddr = beta;
        let cfg = PolicyConfig::new(0.0, 3, 2);
        let choice = ddrts_select(&state, &cs, &cfg, 5, &mf, &mut rng(3)).unwrap();
        assert_eq!((choice.arm, choice.resamples), (1, 0));
    }

    #[test]
    fn symmetric_pair_is_uniform() {
        let cs = ContextSet::new(vec![vec![0.6, 0.3], vec![-0.6, -0.3]], 2).unwrap();
        let beta = DVector::zeros(2);
        let gram = GramMatrix::new(2, 1.0).unwrap();
        let mf = logistic_mean();
        let mut r = rng(11);
        let draws = 10_000;
        let ones = (0..draws)
            .filter(|_| sample_candidates(&beta, &gram, &cs, 0.7, &mf, &mut r).unwrap().candidate == 0)
            .count() as f64;
        let sd = (0.25 / draws as f64).sqrt();
        assert!((ones / draws as f64 - 0.5).abs() <= 4.0 * sd);

        let mc = 4000;
        let probs = estimate_selection_probs(&beta, &gram, &cs, 0.7, mc, &mut r).unwrap();
        assert!((probs[0] - 0.5).abs() <= 4.0 * (0.25 / mc as f64).sqrt());

        // pi = 0.5 > gamma = 1/3, so the first candidate is always played.
        let mut state = EstimatorState::new(2, 1.0, 4.0).unwrap();
        state.gram = gram;
        let cfg = PolicyConfig::new(0.7, 2, 2);
        for t in 2..20 {
            let choice = ddrts_select(&state, &cs, &cfg, t, &mf, &mut r).unwrap();
            assert_eq!(choice.resamples, 0);
        }
    }

    #[test]
    fn sampling_covariance_matches_inverse_gram() {
        let gram = GramMatrix::new(2, 2.0).unwrap();
        let factor = gram.inverse_cholesky_factor().unwrap();
        let mean = DVector::from_vec(vec![0.3, -0.1]);
        let n = 100_000;
        let draws = draw_parameters(&mean, &factor, 1.0, n, &mut rng(5));
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        let avg = draws.iter().fold(DVector::zeros(2), |acc, d| acc + d) / n as f64;
        for d in &draws {
            let c = d - &avg;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        assert!((cov[(0, 0)] - 0.5).abs() <= 0.05 * 0.5);
        assert!((cov[(1, 1)] - 0.5).abs() <= 0.05 * 0.5);
        assert!(cov[(0, 1)].abs() <= 0.05 * 0.5);
    }

    #[test]
    fn dominant_arm_gets_almost_all_mass() {
        // Sampling sd of arm i's predictor is v |x_i|_{V^-1} <= v |x_i| / sqrt(lambda);
        // the gap below exceeds 10 v (|x_1| + |x_2|), i.e. > 7 sd of the difference.
        let cs = ContextSet::new(vec![vec![0.9, 0.0], vec![-0.9, 0.0]], 2).unwrap();
        let beta = DVector::from_vec(vec![1.0, 0.0]);
        let gram = GramMatrix::new(2, 1.0).unwrap();
        let mf = logistic_mean();
        let v = 0.01;
        assert!(mf.mu(0.9) - mf.mu(-0.9) > 10.0 * v * 1.8);
        let probs = estimate_selection_probs(&beta, &gram, &cs, v, 1000, &mut rng(8)).unwrap();
        assert!(probs[0] >= 0.99);
    }

    struct Adversary {
        candidate: usize,
        probs: Vec<f64>,
        calls: usize,
    }

    impl CandidateSampler for Adversary {
        fn n_arms(&self) -> usize {
            self.probs.len()
        }
        fn draw_candidate(&mut self, _: &mut dyn RngCore) -> usize {
            self.calls += 1;
            self.candidate
        }
        fn estimate_probs(&mut self, _: usize, _: &mut dyn RngCore) -> Vec<f64> {
            self.probs.clone()
        }
    }

    #[test]
    fn forced_resampling_exhausts_cap_then_plays() {
        let mut adv = Adversary {
            candidate: 2,
            probs: vec![0.8, 0.15, 0.05],
            calls: 0,
        };
        let gamma = 0.25;
        let choice = ddrts_select_with(&mut adv, gamma, 7, 100, &mut rng(0)).unwrap();
        assert_eq!(choice.arm, 2);
        assert_eq!(choice.resamples, 7);
        assert_eq!(adv.calls, 8);
        // The logged probability is the floored one, never the raw estimate.
        assert_eq!(choice.probs.adjusted[2], gamma / 2.0);
        assert_eq!(choice.probs.raw[2], 0.05);
    }

    #[test]
    fn ucb_examples() {
        let mf = linear_mean();
        let cs = ContextSet::new(vec![vec![0.5], vec![0.9]], 1).unwrap();
        let mut design = GramMatrix::new(1, 1.0).unwrap();
        design.add_weighted(&[1.0], &[1.0]).unwrap();
        let scores = ucb_scores(&DVector::from_vec(vec![1.0]), &design, &cs, 1.0, &mf).unwrap();
        assert!((scores[0] - (0.5 + 0.5 / 2f64.sqrt())).abs() < 1e-12);
        assert!((scores[1] - (0.9 + 0.9 / 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(argmax(&scores), 1);

        let empty = History::new(3, 2, 1.0);
        let cs = ContextSet::new(vec![vec![0.3, 0.0], vec![0.0, 0.8], vec![-0.8, 0.0]], 1).unwrap();
        let solver = SolverConfig::default();
        assert_eq!(glm_ucb_select(&empty, &cs, 1.0, &mf, &solver).unwrap(), 1);
        // tie between arms 1 and 2 goes to the lower index
        assert_eq!(glm_ucb_select(&empty, &ContextSet::new(vec![vec![0.3, 0.0], vec![0.0, 0.8], vec![0.8, 0.0]], 1).unwrap(), 1.0, &mf, &solver).unwrap(), 1);
    }

    #[test]
    fn zero_exploration_is_greedy_everywhere() {
        let mf = logistic_mean();
        let solver = SolverConfig::default();
        let mut h = History::new(3, 2, 1.0);
        let mut r = rng(21);
        for k in 0..15 {
            let x = 0.1 * (k % 5) as f64;
            let cs = ContextSet::new(vec![vec![x, 0.2], vec![-0.5, x], vec![0.3, -0.3]], k + 1).unwrap();
            h.push(RoundRecord {
                context_set: cs,
                chosen_arm: k % 3,
                reward: (k % 2) as f64,
                selection_probs: vec![1.0 / 3.0; 3],
            })
            .unwrap();
        }
        let cs = ContextSet::new(vec![vec![0.2, 0.1], vec![-0.4, 0.6], vec![0.7, 0.0]], 16).unwrap();
        let fit_beta = {
            let mut f = SelectedFit::from_history(&h, 1.0, mf, solver).unwrap();
            f.refit().unwrap().clone()
        };
        let greedy = argmax(&cs.predictors(&fit_beta));
        assert_eq!(ts_glm_select(&h, &cs, 0.0, &mf, &solver, &mut r).unwrap(), greedy);
        assert_eq!(glm_ucb_select(&h, &cs, 0.0, &mf, &solver).unwrap(), greedy);
    }

    #[test]
    fn ts_glm_symmetric_pair_is_uniform() {
        let mf = logistic_mean();
        let solver = SolverConfig::default();
        let h = History::new(2, 2, 1.0);
        let cs = ContextSet::new(vec![vec![0.0, 0.5], vec![0.0, -0.5]], 1).unwrap();
        let mut r = rng(4);
        let n = 10_000;
        let zeros = (0..n)
            .filter(|_| ts_glm_select(&h, &cs, 1.0, &mf, &solver, &mut r).unwrap() == 0)
            .count() as f64;
        assert!((zeros / n as f64 - 0.5).abs() <= 4.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn uniform_random_examples() {
        let n = 100_000;
        let cs = ContextSet::new(vec![vec![0.0]; 4], 1).unwrap();
        let mut counts = [0usize; 4];
        let mut r = rng(9);
        for _ in 0..n {
            counts[uniform_random_select(&cs, &mut r)] += 1;
        }
        let sd = (0.25 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 4.0 * sd);
        }
        assert_eq!(uniform_random_arm(1, &mut r), 0);
        let mut r1 = rng(77);
        let mut r2 = rng(77);
        let s1: Vec<usize> = (0..50).map(|_| uniform_random_select(&cs, &mut r1)).collect();
        let s2: Vec<usize> = (0..50).map(|_| uniform_random_select(&cs, &mut r2)).collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn policy_spec_json() {
        let spec: PolicySpec = serde_json::from_str(r#"{"kind":"ddrts","v":0.01}"#).unwrap();
        assert_eq!(spec, PolicySpec::ddrts(0.01));
        assert!(serde_json::from_str::<PolicySpec>(r#"{"kind":"ddrts","vv":0.01}"#).is_err());
        assert_eq!(spec.with_exploration(1.0).exploration(), Some(1.0));
        let spec: PolicySpec = serde_json::from_str(r#"{"kind":"uniform"}"#).unwrap();
        assert_eq!(spec.label(), "uniform");
    }

    #[test]
    fn config_validation() {
        let mut cfg = PolicyConfig::new(0.1, 10, 3);
        assert!(cfg.validate(10).is_ok());
        cfg.mc_samples = 99;
        assert!(cfg.validate(10).is_err());
        let cfg = PolicyConfig { gamma: 0.1, ..PolicyConfig::new(0.1, 10, 3) };
        assert!(cfg.validate(10).is_err());
    }
}
