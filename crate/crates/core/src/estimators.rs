//! The doubly-robust estimator chain.
//!
//! Each update runs three stages over the history `H_t`:
//!
//! 1. a bounded maximum-likelihood estimate fitted on the selected arms only,
//!    radially projected onto the ball of radius `S`;
//! 2. an imputation estimate: ridge GLM over the contexts of *all* arms, with
//!    inverse-propensity pseudo-rewards whose imputed means come from stage 1;
//! 3. the DDR estimate: the same ridge GLM, with every pseudo-reward of every
//!    past round rebuilt from the stage-2 estimate of the current round.
//!
//! The Gram matrix `V_t` that drives Thompson sampling is maintained alongside.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{dot, solve_ridge_glm, ContextSet, GramMatrix, MeanFunction, SolverConfig};

/// Ridge used when solving the selected-arm score equation, which has no
/// solution under separation.
pub const MLE_FALLBACK_RIDGE: f64 = 1e-6;

/// Newton iteration floor for the bounded MLE.
pub const MLE_MIN_ITER: usize = 2000;

/// Tolerance on the selection probabilities summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// One round of interaction. `chosen_arm` is 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub context_set: ContextSet,
    pub chosen_arm: usize,
    pub reward: f64,
    pub selection_probs: Vec<f64>,
}

/// Append-only interaction history.
///
/// Besides the records it keeps two row-major stacks: the contexts of every arm
/// of every round (`N t x d`) and the selected contexts (`t x d`).
#[derive(Debug, Clone)]
pub struct History {
    n_arms: usize,
    dim: usize,
    reward_bound: f64,
    prob_floor: f64,
    rounds: Vec<RoundRecord>,
    all_contexts: Vec<f64>,
    selected_contexts: Vec<f64>,
    rewards: Vec<f64>,
}

impl History {
    /// Empty history. `reward_bound` is the `B` with `|Y_t| <= B`.
    pub fn new(n_arms: usize, dim: usize, reward_bound: f64) -> Self {
        Self {
            n_arms,
            dim,
            reward_bound,
            prob_floor: 0.0,
            rounds: Vec::new(),
            all_contexts: Vec::new(),
            selected_contexts: Vec::new(),
            rewards: Vec::new(),
        }
    }

    /// Require every logged selection probability to be at least `floor`.
    pub fn with_probability_floor(mut self, floor: f64) -> Self {
        self.prob_floor = floor;
        self
    }

    pub fn push(&mut self, record: RoundRecord) -> Result<()> {
        let cs = &record.context_set;
        if cs.n_arms() != self.n_arms || cs.dim() != self.dim {
            return Err(Error::InvalidInput(format!(
                "round has {} arms of dimension {}, history expects {} x {}",
                cs.n_arms(),
                cs.dim(),
                self.n_arms,
                self.dim
            )));
        }
        if record.chosen_arm >= self.n_arms {
            return Err(Error::InvalidInput(format!("chosen arm {} out of range", record.chosen_arm)));
        }
        if !(record.reward.is_finite() && record.reward.abs() <= self.reward_bound) {
            return Err(Error::InvalidInput(format!(
                "reward {} exceeds bound {}",
                record.reward, self.reward_bound
            )));
        }
        let probs = &record.selection_probs;
        if probs.len() != self.n_arms {
            return Err(Error::InvalidInput("one selection probability per arm is required".into()));
        }
        if probs.iter().any(|p| !(*p > 0.0 && *p >= self.prob_floor && p.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "selection probabilities must be positive and >= {}: {probs:?}",
                self.prob_floor
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!("selection probabilities sum to {sum}")));
        }
        self.all_contexts.extend_from_slice(cs.as_slice());
        self.selected_contexts.extend_from_slice(cs.arm(record.chosen_arm));
        self.rewards.push(record.reward);
        self.rounds.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    /// Contexts of every arm of every round, row-major, round-major order.
    pub fn all_contexts(&self) -> &[f64] {
        &self.all_contexts
    }

    /// Contexts of the selected arms, row-major.
    pub fn selected_contexts(&self) -> &[f64] {
        &self.selected_contexts
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

/// `{1 - I(a_t = i) / pi_i} mu(x_i' imputer) + I(a_t = i) / pi_i * Y_t`.
pub fn pseudo_reward(record: &RoundRecord, arm: usize, imputer: &DVector<f64>, mf: &MeanFunction) -> Result<f64> {
    let cs = &record.context_set;
    if arm >= cs.n_arms() {
        return Err(Error::InvalidInput(format!("arm {arm} out of range")));
    }
    let pi = record.selection_probs[arm];
    if !(pi > 0.0) {
        return Err(Error::InvalidInput(format!("selection probability of arm {arm} is {pi}")));
    }
    let imputed = mf.mu(dot(cs.arm(arm), imputer.as_slice()));
    let weight = if record.chosen_arm == arm { 1.0 / pi } else { 0.0 };
    Ok((1.0 - weight) * imputed + weight * record.reward)
}

/// Pseudo-rewards for every arm of every round, aligned with
/// [`History::all_contexts`], all built from the same imputer.
pub fn pseudo_reward_targets(history: &History, imputer: &DVector<f64>, mf: &MeanFunction) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len() * history.n_arms());
    for record in history.rounds() {
        for arm in 0..history.n_arms() {
            let imputed = mf.mu(dot(record.context_set.arm(arm), imputer.as_slice()));
            let weight = if record.chosen_arm == arm {
                1.0 / record.selection_probs[arm]
            } else {
                0.0
            };
            out.push((1.0 - weight) * imputed + weight * record.reward);
        }
    }
    out
}

/// Radial projection onto `{|beta|_2 <= s}`.
///
/// The computed norm of the result never exceeds `s`, so projecting twice
/// returns the same vector.
pub fn project_to_ball(beta: &DVector<f64>, s: f64) -> DVector<f64> {
    let norm = beta.norm();
    if norm <= s {
        return beta.clone();
    }
    let mut out = beta * (s / norm);
    while out.norm() > s {
        out *= 1.0 - f64::EPSILON;
    }
    out
}

/// The bounded MLE and the unconstrained solution it was projected from.
#[derive(Debug, Clone)]
pub struct BoundedMle {
    pub projected: DVector<f64>,
    pub unconstrained: DVector<f64>,
}

/// Bounded MLE from the zero vector. See [`bounded_mle_from`].
pub fn bounded_mle(history: &History, s_bound: f64, mf: &MeanFunction, cfg: &SolverConfig) -> Result<DVector<f64>> {
    let zero = DVector::zeros(history.dim());
    bounded_mle_from(history, s_bound, mf, cfg, &zero).map(|b| b.projected)
}

/// Solve the selected-arm score equation (with ridge [`MLE_FALLBACK_RIDGE`])
/// starting at `init`, then project onto the ball of radius `s_bound`.
pub fn bounded_mle_from(
    history: &History,
    s_bound: f64,
    mf: &MeanFunction,
    cfg: &SolverConfig,
    init: &DVector<f64>,
) -> Result<BoundedMle> {
    if history.is_empty() {
        return Err(Error::InvalidInput("bounded MLE needs at least one round".into()));
    }
    if !(s_bound > 0.0) {
        return Err(Error::Config(format!("S must be positive, got {s_bound}")));
    }
    // Separated data pushes the nearly unpenalized optimum far out, where
    // Newton gains only a constant margin per step.
    let cfg = SolverConfig {
        max_iter: cfg.max_iter.max(MLE_MIN_ITER),
        ..*cfg
    };
    let sol = solve_ridge_glm(
        mf,
        history.selected_contexts(),
        history.dim(),
        history.rewards(),
        MLE_FALLBACK_RIDGE,
        init,
        &cfg,
    )
    .map_err(|e| e.at_round(history.len()))?;
    Ok(BoundedMle {
        projected: project_to_ball(&sol.beta, s_bound),
        unconstrained: sol.beta,
    })
}

/// Ridge GLM over all `N t` contexts with pseudo-rewards imputed by `nmle`.
pub fn imputation_estimator(
    history: &History,
    nmle: &DVector<f64>,
    lambda: f64,
    mf: &MeanFunction,
    cfg: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    fit_on_pseudo_rewards(history, nmle, lambda, mf, cfg, init)
}

/// The DDR estimate: ridge GLM over all `N t` contexts with every past
/// pseudo-reward rebuilt from the current round's imputation estimate.
pub fn ddr_estimator(
    history: &History,
    imputer: &DVector<f64>,
    lambda: f64,
    mf: &MeanFunction,
    cfg: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    fit_on_pseudo_rewards(history, imputer, lambda, mf, cfg, init)
}

fn fit_on_pseudo_rewards(
    history: &History,
    imputer: &DVector<f64>,
    lambda: f64,
    mf: &MeanFunction,
    cfg: &SolverConfig,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if imputer.len() != history.dim() {
        return Err(Error::InvalidInput("imputer dimension mismatch".into()));
    }
    let targets = pseudo_reward_targets(history, imputer, mf);
    let zero = DVector::zeros(history.dim());
    let sol = solve_ridge_glm(
        mf,
        history.all_contexts(),
        history.dim(),
        &targets,
        lambda,
        init.unwrap_or(&zero),
        cfg,
    )
    .map_err(|e| e.at_round(history.len()))?;
    Ok(sol.beta)
}

/// How `V_t` is maintained between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramMode {
    /// Reweight every stored context with the latest estimate each round.
    #[default]
    Exact,
    /// Weight each round once, when it enters the matrix. Approximate.
    FrozenWeight,
}

/// Settings of the estimator chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub ridge: f64,
    pub bound_s: f64,
    pub solver: SolverConfig,
    pub gram_mode: GramMode,
    /// Refit the estimators every `update_every` rounds (1 = every round).
    pub update_every: usize,
}

impl EstimatorConfig {
    pub fn new(ridge: f64, bound_s: f64) -> Self {
        Self {
            ridge,
            bound_s,
            solver: SolverConfig::default(),
            gram_mode: GramMode::Exact,
            update_every: 1,
        }
    }
}

/// Current estimates of the chain together with `V_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EstimatorSnapshot", into = "EstimatorSnapshot")]
pub struct EstimatorState {
    /// Bounded MLE (norm at most `bound_s`).
    pub bounded_mle: DVector<f64>,
    /// Selected-arm ridge solution before projection; warm start only.
    pub unconstrained_mle: DVector<f64>,
    pub imputation: DVector<f64>,
    pub ddr: DVector<f64>,
    pub gram: GramMatrix,
    pub bound_s: f64,
    pub ridge: f64,
    /// Number of history rounds folded into `gram`.
    pub gram_rounds: usize,
    /// Number of history rounds at the last refit of the estimators.
    pub fitted_rounds: usize,
    /// Estimate used to weight `gram` when it was last rebuilt.
    gram_weights_from: DVector<f64>,
}

impl EstimatorState {
    /// `V_1 = lambda I` and all estimates at zero.
    pub fn new(dim: usize, ridge: f64, bound_s: f64) -> Result<Self> {
        if !(bound_s > 0.0) {
            return Err(Error::Config(format!("S must be positive, got {bound_s}")));
        }
        let zero = DVector::zeros(dim);
        Ok(Self {
            bounded_mle: zero.clone(),
            unconstrained_mle: zero.clone(),
            imputation: zero.clone(),
            ddr: zero.clone(),
            gram: GramMatrix::new(dim, ridge)?,
            bound_s,
            ridge,
            gram_rounds: 0,
            fitted_rounds: 0,
            gram_weights_from: zero,
        })
    }

    /// Bring the state up to date with `history` (one update per round).
    ///
    /// `V_t` is weighted by `mu'(x' beta_{t-1})`, i.e. with the DDR estimate
    /// from before this update, and the chain is then refitted when the
    /// cadence says so.
    pub fn update(&mut self, history: &History, mf: &MeanFunction, cfg: &EstimatorConfig) -> Result<()> {
        let t = history.len();
        if t == 0 {
            return Ok(());
        }
        let dim = history.dim();
        let per_round = history.n_arms() * dim;
        let weights_for = |rows: &[f64], beta: &DVector<f64>| -> Vec<f64> {
            rows.chunks_exact(dim).map(|x| mf.mu_prime(dot(x, beta.as_slice()))).collect()
        };
        let reweight = cfg.gram_mode == GramMode::Exact && self.gram_weights_from != self.ddr;
        if reweight {
            let rows = history.all_contexts();
            self.gram = GramMatrix::from_stack(rows, dim, &weights_for(rows, &self.ddr), self.ridge)?;
            self.gram_weights_from = self.ddr.clone();
        } else if self.gram_rounds < t {
            let rows = &history.all_contexts()[self.gram_rounds * per_round..];
            self.gram.add_weighted(rows, &weights_for(rows, &self.ddr))?;
        }
        self.gram_rounds = t;

        let every = cfg.update_every.max(1);
        if !t.is_multiple_of(every) {
            return Ok(());
        }
        let mle = bounded_mle_from(history, self.bound_s, mf, &cfg.solver, &self.unconstrained_mle)?;
        let imputation =
            imputation_estimator(history, &mle.projected, self.ridge, mf, &cfg.solver, Some(&self.imputation))?;
        let ddr = ddr_estimator(history, &imputation, self.ridge, mf, &cfg.solver, Some(&self.ddr))?;
        self.bounded_mle = mle.projected;
        self.unconstrained_mle = mle.unconstrained;
        self.imputation = imputation;
        self.ddr = ddr;
        self.fitted_rounds = t;
        Ok(())
    }
}

/// JSON form of [`EstimatorState`]: vectors as arrays, matrices row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorSnapshot {
    bounded_mle: Vec<f64>,
    unconstrained_mle: Vec<f64>,
    imputation: Vec<f64>,
    ddr: Vec<f64>,
    gram: Vec<Vec<f64>>,
    gram_weights_from: Vec<f64>,
    bound_s: f64,
    ridge: f64,
    gram_rounds: usize,
    fitted_rounds: usize,
}

impl From<EstimatorState> for EstimatorSnapshot {
    fn from(s: EstimatorState) -> Self {
        let m = s.gram.matrix();
        Self {
            bounded_mle: s.bounded_mle.as_slice().to_vec(),
            unconstrained_mle: s.unconstrained_mle.as_slice().to_vec(),
            imputation: s.imputation.as_slice().to_vec(),
            ddr: s.ddr.as_slice().to_vec(),
            gram: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
            gram_weights_from: s.gram_weights_from.as_slice().to_vec(),
            bound_s: s.bound_s,
            ridge: s.ridge,
            gram_rounds: s.gram_rounds,
            fitted_rounds: s.fitted_rounds,
        }
    }
}

impl TryFrom<EstimatorSnapshot> for EstimatorState {
    type Error = Error;
    fn try_from(s: EstimatorSnapshot) -> Result<Self> {
        let dim = s.ddr.len();
        let vectors = [&s.bounded_mle, &s.unconstrained_mle, &s.imputation, &s.gram_weights_from];
        if vectors.iter().any(|v| v.len() != dim) || s.gram.len() != dim || s.gram.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("estimator snapshot has inconsistent dimensions".into()));
        }
        let bounded = DVector::from_vec(s.bounded_mle);
        if bounded.norm() > s.bound_s * (1.0 + 1e-12) {
            return Err(Error::InvalidInput("bounded MLE exceeds S in snapshot".into()));
        }
        let matrix = DMatrix::from_row_iterator(dim, dim, s.gram.into_iter().flatten());
        Ok(Self {
            bounded_mle: bounded,
            unconstrained_mle: DVector::from_vec(s.unconstrained_mle),
            imputation: DVector::from_vec(s.imputation),
            ddr: DVector::from_vec(s.ddr),
            gram: GramMatrix::from_parts(matrix, s.ridge)?,
            bound_s: s.bound_s,
            ridge: s.ridge,
            gram_rounds: s.gram_rounds,
            fitted_rounds: s.fitted_rounds,
            gram_weights_from: DVector::from_vec(s.gram_weights_from),
        })
    }
}
