//! Seeded simulation runs, hyperparameter grids and aggregation.
//!
//! Every run derives two independent ChaCha streams from its seed: stream 0
//! drives the environment (contexts and reward noise) and stream 1 the policy.
//! Policies compared on the same seed therefore face identical contexts and
//! reward draws. Runs are independent of scheduling order.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environments::{default_mean_vector, equicorrelated, gen_beta_star, Environment, SyntheticSpec};
use crate::error::{Error, Result};
use crate::policies::{Policy, PolicySpec};

/// Current experiment config schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Offset separating tuning seeds from evaluation seeds.
pub const TUNING_SEED_OFFSET: u64 = 1_000_000;

const ENV_STREAM: u64 = 0;
const POLICY_STREAM: u64 = 1;
const BETA_STREAM: u64 = 2;

/// A ChaCha8 generator for one stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-round record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub policy: String,
    pub exploration: Option<f64>,
    pub seed: u64,
    pub regret: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// 0-based arms.
    pub arms: Vec<usize>,
    pub resamples: Vec<usize>,
    pub elapsed_ms: Vec<f64>,
    /// `|beta_hat_t - beta*|_2` after each round, when both are available.
    pub estimator_error: Option<Vec<f64>>,
    /// The wall-clock budget ran out before the horizon.
    pub truncated: bool,
    pub approximations: Vec<String>,
}

impl RegretTrace {
    pub fn len(&self) -> usize {
        self.regret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regret.is_empty()
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Cumulative regret after round `t` (1-based).
    pub fn cumulative_at(&self, t: usize) -> Option<f64> {
        t.checked_sub(1).and_then(|k| self.cumulative.get(k).copied())
    }

    /// Write `t, regret, cum_regret, arm, resamples, elapsed_ms` with 1-based arms.
    pub fn write_csv(&self, writer: impl std::io::Write, with_timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "regret", "cum_regret", "arm", "resamples", "elapsed_ms"])?;
        for k in 0..self.len() {
            let elapsed = if with_timing { self.elapsed_ms[k] } else { 0.0 };
            w.write_record([
                (k + 1).to_string(),
                self.regret[k].to_string(),
                self.cumulative[k].to_string(),
                (self.arms[k] + 1).to_string(),
                self.resamples[k].to_string(),
                elapsed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run `policy` for `horizon` rounds on `env` with the streams of `seed`.
///
/// With a `budget`, the run stops early once the wall-clock time exceeds it
/// and the trace is flagged as truncated.
pub fn run_episode(
    env: &dyn Environment,
    policy: &mut dyn Policy,
    horizon: usize,
    seed: u64,
    budget: Option<Duration>,
) -> Result<RegretTrace> {
    let mut env_rng = stream_rng(seed, ENV_STREAM);
    let mut policy_rng = stream_rng(seed, POLICY_STREAM);
    let start = Instant::now();
    let mut trace = RegretTrace {
        policy: policy.name().to_string(),
        exploration: None,
        seed,
        regret: Vec::with_capacity(horizon),
        cumulative: Vec::with_capacity(horizon),
        arms: Vec::with_capacity(horizon),
        resamples: Vec::with_capacity(horizon),
        elapsed_ms: Vec::with_capacity(horizon),
        estimator_error: env.beta_star().and(policy.estimate()).map(|_| Vec::with_capacity(horizon)),
        truncated: false,
        approximations: policy.approximations(),
    };
    let mut total = 0.0;
    for t in 1..=horizon {
        if budget.is_some_and(|b| start.elapsed() > b) {
            trace.truncated = true;
            log::warn!("{} seed {seed}: wall-clock budget exhausted at round {t}", trace.policy);
            break;
        }
        let draw = env.draw_round(t, &mut env_rng)?;
        let decision = policy.select(&draw.contexts, &mut policy_rng)?;
        if decision.arm >= env.n_arms() {
            return Err(Error::Internal(format!("policy chose arm {} of {}", decision.arm, env.n_arms())));
        }
        let reward = draw.reward(decision.arm);
        let regret = draw.regret(decision.arm);
        policy.observe(&draw.contexts, &decision, reward)?;
        total += regret;
        trace.regret.push(regret);
        trace.cumulative.push(total);
        trace.arms.push(decision.arm);
        trace.resamples.push(decision.resamples);
        trace.elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if let (Some(errors), Some(beta_star), Some(estimate)) =
            (trace.estimator_error.as_mut(), env.beta_star(), policy.estimate())
        {
            errors.push((estimate - beta_star).norm());
        }
    }
    Ok(trace)
}

/// Build `spec`'s policy for `env` and run it.
pub fn run_spec(
    env: &dyn Environment,
    spec: &PolicySpec,
    horizon: usize,
    seed: u64,
    budget: Option<Duration>,
) -> Result<RegretTrace> {
    let mut policy = spec.build(env.n_arms(), env.dim(), env.mean_function())?;
    let mut trace = run_episode(env, policy.as_mut(), horizon, seed, budget)?;
    trace.policy = spec.label().to_string();
    trace.exploration = spec.exploration();
    Ok(trace)
}

/// Run every `(spec, seed)` pair on at most `jobs` threads. Output order follows
/// input order.
pub fn run_all<E, F>(
    env_for_seed: &F,
    tasks: &[(PolicySpec, u64)],
    horizon: usize,
    budget: Option<Duration>,
    jobs: usize,
) -> Result<Vec<RegretTrace>>
where
    E: Environment,
    F: Fn(u64) -> Result<E> + Sync,
{
    let run = |(spec, seed): &(PolicySpec, u64)| -> Result<RegretTrace> {
        let env = env_for_seed(*seed)?;
        log::debug!("running {} ({:?}) seed {seed}", spec.label(), spec.exploration());
        run_spec(&env, spec, horizon, *seed, budget)
    };
    if jobs <= 1 {
        return tasks.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    pool.install(|| tasks.par_iter().map(run).collect())
}

/// Mean final regret of one grid point over the tuning seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub exploration: Option<f64>,
    pub mean_final_regret: f64,
}

/// Outcome of [`grid_search`] for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub policy: String,
    pub best: PolicySpec,
    pub scores: Vec<GridScore>,
}

/// Pick the grid value with the smallest mean cumulative regret at the
/// horizon over `seeds`; ties go to the earlier grid value. An empty grid
/// evaluates `template` as is.
pub fn grid_search<E, F>(
    env_for_seed: &F,
    template: &PolicySpec,
    grid: &[f64],
    seeds: &[u64],
    horizon: usize,
    budget: Option<Duration>,
    jobs: usize,
) -> Result<GridOutcome>
where
    E: Environment,
    F: Fn(u64) -> Result<E> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("grid search needs at least one seed".into()));
    }
    let candidates: Vec<PolicySpec> = if grid.is_empty() || template.exploration().is_none() {
        vec![template.clone()]
    } else {
        grid.iter().map(|v| template.with_exploration(*v)).collect()
    };
    let tasks: Vec<(PolicySpec, u64)> = candidates
        .iter()
        .flat_map(|c| seeds.iter().map(move |s| (c.clone(), *s)))
        .collect();
    let traces = run_all(env_for_seed, &tasks, horizon, budget, jobs)?;
    let scores: Vec<GridScore> = candidates
        .iter()
        .zip(traces.chunks(seeds.len()))
        .map(|(c, runs)| GridScore {
            exploration: c.exploration(),
            mean_final_regret: runs.iter().map(RegretTrace::final_regret).sum::<f64>() / runs.len() as f64,
        })
        .collect();
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if s.mean_final_regret < scores[best].mean_final_regret {
            best = k;
        }
    }
    Ok(GridOutcome {
        policy: template.label().to_string(),
        best: candidates[best].clone(),
        scores,
    })
}

/// Type-7 (linear interpolation) sample quantile of unsorted data.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summary statistics of cumulative regret at the final common round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub round: usize,
    pub mean: f64,
    pub sd: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-round mean and standard deviation of cumulative regret across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub final_stats: FinalStats,
}

/// Aggregate the cumulative-regret curves over their common prefix.
pub fn aggregate(traces: &[RegretTrace]) -> Result<Aggregate> {
    let rounds = traces.iter().map(RegretTrace::len).min().unwrap_or(0);
    if rounds == 0 {
        return Err(Error::InvalidInput("aggregation needs at least one non-empty trace".into()));
    }
    let mut mean = Vec::with_capacity(rounds);
    let mut sd = Vec::with_capacity(rounds);
    let mut column = vec![0.0; traces.len()];
    for t in 0..rounds {
        for (c, tr) in column.iter_mut().zip(traces) {
            *c = tr.cumulative[t];
        }
        let (m, s) = mean_sd(&column);
        mean.push(m);
        sd.push(s);
    }
    let last = &column;
    let q = |p| quantile(last, p).expect("non-empty");
    Ok(Aggregate {
        runs: traces.len(),
        final_stats: FinalStats {
            round: rounds,
            mean: mean[rounds - 1],
            sd: sd[rounds - 1],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            min: q(0.0),
            max: q(1.0),
        },
        mean,
        sd,
    })
}

/// How `beta*` is chosen across repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// One `beta*` shared by every run.
    #[default]
    Fixed,
    /// A fresh `beta*` per run seed.
    PerRun,
}

/// Synthetic environment section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub n_arms: usize,
    pub dim: usize,
    /// Per-arm coordinate means; defaults to [`default_mean_vector`].
    #[serde(default)]
    pub mean_vector: Option<Vec<f64>>,
    #[serde(default = "default_off_diagonal")]
    pub off_diagonal: f64,
    #[serde(default)]
    pub beta_mode: BetaMode,
    /// Seed of the shared `beta*` in fixed mode; defaults to the master seed.
    #[serde(default)]
    pub beta_seed: Option<u64>,
    /// Explicit `beta*`, overriding any drawn one.
    #[serde(default)]
    pub beta_star: Option<Vec<f64>>,
}

fn default_off_diagonal() -> f64 {
    0.5
}

impl EnvironmentConfig {
    pub fn new(n_arms: usize, dim: usize) -> Self {
        Self {
            n_arms,
            dim,
            mean_vector: None,
            off_diagonal: default_off_diagonal(),
            beta_mode: BetaMode::Fixed,
            beta_seed: None,
            beta_star: None,
        }
    }

    fn beta_star_for(&self, master_seed: u64, run_seed: u64) -> DVector<f64> {
        if let Some(b) = &self.beta_star {
            return DVector::from_column_slice(b);
        }
        let seed = match self.beta_mode {
            BetaMode::Fixed => self.beta_seed.unwrap_or(master_seed),
            BetaMode::PerRun => run_seed,
        };
        gen_beta_star(self.dim, &mut stream_rng(seed, BETA_STREAM))
    }

    /// The synthetic environment faced by run `run_seed`.
    pub fn build(&self, master_seed: u64, run_seed: u64) -> Result<SyntheticSpec> {
        let means = self.mean_vector.clone().unwrap_or_else(|| default_mean_vector(self.n_arms));
        if means.len() != self.n_arms {
            return Err(Error::Config(format!(
                "mean_vector has {} entries for {} arms",
                means.len(),
                self.n_arms
            )));
        }
        let beta = self.beta_star_for(master_seed, run_seed);
        if beta.len() != self.dim {
            return Err(Error::Config("beta_star length must equal dim".into()));
        }
        SyntheticSpec::new(means, equicorrelated(self.n_arms, self.off_diagonal), beta)
    }
}

/// A policy template with the grid of exploration values to tune over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyGrid {
    pub policy: PolicySpec,
    #[serde(default)]
    pub grid: Vec<f64>,
}

/// A full simulation experiment: tune each policy on tuning seeds, then
/// evaluate the best setting on disjoint evaluation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub environment: EnvironmentConfig,
    pub policies: Vec<PolicyGrid>,
    pub horizon: usize,
    /// Evaluation runs per policy (seeds `seed .. seed + repetitions`).
    pub repetitions: usize,
    /// Tuning runs per grid point (seeds offset by [`TUNING_SEED_OFFSET`]).
    #[serde(default = "default_tuning_repetitions")]
    pub tuning_repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub max_seconds_per_run: Option<f64>,
    /// Write wall-clock timings into the per-run CSV (breaks byte-identical output).
    #[serde(default)]
    pub record_timing: bool,
    /// Number of points in the downsampled curves of the summary.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

fn default_tuning_repetitions() -> usize {
    1
}

fn default_curve_points() -> usize {
    100
}

/// Exploration grid shared by all tuned policies by default.
pub const DEFAULT_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be >= 2".into()));
        }
        if self.repetitions == 0 || self.tuning_repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one policy is required".into()));
        }
        for p in &self.policies {
            if p.policy.exploration().is_some() && p.grid.is_empty() {
                return Err(Error::Config(format!("policy {} has an empty grid", p.policy.label())));
            }
            if p.grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("policy {} has an invalid grid value", p.policy.label())));
            }
        }
        if self.max_seconds_per_run.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("max_seconds_per_run must be positive".into()));
        }
        self.environment.build(self.seed, self.seed).map(|_| ())
    }

    pub fn evaluation_seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|k| self.seed.wrapping_add(k)).collect()
    }

    pub fn tuning_seeds(&self) -> Vec<u64> {
        (0..self.tuning_repetitions as u64)
            .map(|k| self.seed.wrapping_add(TUNING_SEED_OFFSET + k))
            .collect()
    }

    fn budget(&self) -> Option<Duration> {
        self.max_seconds_per_run.map(Duration::from_secs_f64)
    }
}

/// Tuning and evaluation results of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub tuning: GridOutcome,
    pub evaluation: Vec<RegretTrace>,
    pub aggregate: Aggregate,
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub tuning_seeds: Vec<u64>,
    pub evaluation_seeds: Vec<u64>,
    pub policies: Vec<PolicyReport>,
}

/// Tune every policy, then evaluate the chosen settings with common random
/// numbers across policies.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    config.validate()?;
    let env_cfg = &config.environment;
    let master = config.seed;
    let env_for_seed = |seed: u64| env_cfg.build(master, seed);
    let tuning_seeds = config.tuning_seeds();
    let evaluation_seeds = config.evaluation_seeds();

    let mut outcomes = Vec::with_capacity(config.policies.len());
    for p in &config.policies {
        let outcome = grid_search(
            &env_for_seed,
            &p.policy,
            &p.grid,
            &tuning_seeds,
            config.horizon,
            config.budget(),
            jobs,
        )?;
        log::info!(
            "tuned {}: best exploration {:?}",
            outcome.policy,
            outcome.best.exploration()
        );
        outcomes.push(outcome);
    }

    let tasks: Vec<(PolicySpec, u64)> = outcomes
        .iter()
        .flat_map(|o| evaluation_seeds.iter().map(move |s| (o.best.clone(), *s)))
        .collect();
    let traces = run_all(&env_for_seed, &tasks, config.horizon, config.budget(), jobs)?;
    let policies = outcomes
        .into_iter()
        .zip(traces.chunks(evaluation_seeds.len()))
        .map(|(tuning, runs)| {
            Ok(PolicyReport {
                aggregate: aggregate(runs)?,
                evaluation: runs.to_vec(),
                tuning,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        config: config.clone(),
        tuning_seeds,
        evaluation_seeds,
        policies,
    })
}

#[derive(Serialize)]
struct CurveSummary {
    rounds: Vec<usize>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

#[derive(Serialize)]
struct PolicySummary<'a> {
    policy: &'a str,
    best: &'a PolicySpec,
    tuning: &'a [GridScore],
    final_stats: &'a FinalStats,
    final_regret_per_seed: Vec<f64>,
    curve: CurveSummary,
    approximations: Vec<String>,
    truncated_runs: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    horizon: usize,
    tuning_seeds: &'a [u64],
    evaluation_seeds: &'a [u64],
    policies: Vec<PolicySummary<'a>>,
}

/// Rounds `1..=horizon` downsampled to about `points` entries, always
/// including the last one.
fn curve_rounds(horizon: usize, points: usize) -> Vec<usize> {
    let step = horizon.div_ceil(points.max(1)).max(1);
    let mut rounds: Vec<usize> = (step..=horizon).step_by(step).collect();
    if rounds.last() != Some(&horizon) {
        rounds.push(horizon);
    }
    rounds
}

impl ExperimentReport {
    /// The JSON summary: per policy the tuning scores, final-round statistics
    /// and the downsampled mean/sd curve.
    pub fn summary_json(&self) -> Result<String> {
        let policies = self
            .policies
            .iter()
            .map(|p| {
                let rounds = curve_rounds(p.aggregate.mean.len(), self.config.curve_points);
                let mut approximations: Vec<String> =
                    p.evaluation.iter().flat_map(|t| t.approximations.clone()).collect();
                approximations.sort();
                approximations.dedup();
                PolicySummary {
                    policy: &p.tuning.policy,
                    best: &p.tuning.best,
                    tuning: &p.tuning.scores,
                    final_stats: &p.aggregate.final_stats,
                    final_regret_per_seed: p.evaluation.iter().map(RegretTrace::final_regret).collect(),
                    curve: CurveSummary {
                        mean: rounds.iter().map(|t| p.aggregate.mean[t - 1]).collect(),
                        sd: rounds.iter().map(|t| p.aggregate.sd[t - 1]).collect(),
                        rounds,
                    },
                    approximations,
                    truncated_runs: p.evaluation.iter().filter(|t| t.truncated).count(),
                }
            })
            .collect();
        let summary = Summary {
            schema_version: SCHEMA_VERSION,
            horizon: self.config.horizon,
            tuning_seeds: &self.tuning_seeds,
            evaluation_seeds: &self.evaluation_seeds,
            policies,
        };
        Ok(serde_json::to_string_pretty(&summary)?)
    }

    /// Write `summary.json` and one `runs/<policy>_seed<seed>.csv` per
    /// evaluation run under `dir`. Returns the written paths.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let runs_dir = dir.join("runs");
        fs::create_dir_all(&runs_dir)?;
        let mut written = Vec::new();
        for p in &self.policies {
            for trace in &p.evaluation {
                let path = runs_dir.join(format!("{}_seed{}.csv", trace.policy, trace.seed));
                trace.write_csv(fs::File::create(&path)?, self.config.record_timing)?;
                written.push(path);
            }
        }
        let summary = dir.join("summary.json");
        fs::write(&summary, self.summary_json()?)?;
        written.push(summary);
        Ok(written)
    }
}
