//! Data-generating processes.
//!
//! [`SyntheticSpec`] draws arm-correlated Gaussian contexts, projects them onto
//! the unit ball and pays Bernoulli rewards with a logistic mean. [`ReplayLog`]
//! holds uniformly logged events and [`replay_evaluate`] scores a policy on the
//! rounds where its choice matches the logged arm.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{argmax, dot, logistic_mean, weighted_gram, ContextSet, GramMatrix, MeanFunction};
use crate::policies::Policy;

/// Everything a simulated round reveals, drawn before the policy acts so that
/// every policy sees the same stream for a given seed.
#[derive(Debug, Clone)]
pub struct RoundDraw {
    pub contexts: ContextSet,
    /// Expected reward of each arm.
    pub means: Vec<f64>,
    /// Uniform variate deciding the Bernoulli reward of whichever arm is played.
    pub noise: f64,
}

impl RoundDraw {
    pub fn reward(&self, arm: usize) -> f64 {
        if self.noise < self.means[arm] {
            1.0
        } else {
            0.0
        }
    }

    /// `max_i mean_i - mean_arm`.
    pub fn regret(&self, arm: usize) -> f64 {
        let best = self.means[argmax(&self.means)];
        (best - self.means[arm]).max(0.0)
    }
}

/// A simulated bandit environment.
pub trait Environment: Sync {
    fn n_arms(&self) -> usize;
    fn dim(&self) -> usize;
    fn mean_function(&self) -> MeanFunction;
    fn draw_round(&self, t: usize, rng: &mut dyn RngCore) -> Result<RoundDraw>;

    /// True parameter, when known.
    fn beta_star(&self) -> Option<&DVector<f64>> {
        None
    }
}

/// Source of context sets, for diagnostics.
pub trait ContextSampler {
    fn sample_contexts(&self, t: usize, rng: &mut dyn RngCore) -> Result<ContextSet>;
}

/// Per-coordinate means of the arms: `[-N/2, ..., -1, 1, ..., N/2]` for even
/// `N`; for odd `N` the symmetric integers `-(N-1)/2..=(N-1)/2`.
pub fn default_mean_vector(n_arms: usize) -> Vec<f64> {
    let half = (n_arms / 2) as i64;
    if n_arms.is_multiple_of(2) {
        (-half..=half).filter(|k| *k != 0).map(|k| k as f64).collect()
    } else {
        (-half..=half).map(|k| k as f64).collect()
    }
}

/// Unit diagonal with a constant off-diagonal correlation.
pub fn equicorrelated(n_arms: usize, off_diagonal: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n_arms, n_arms, |i, j| if i == j { 1.0 } else { off_diagonal })
}

/// The synthetic generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    n_arms: usize,
    dim: usize,
    mean_vector: DVector<f64>,
    covariance: DMatrix<f64>,
    covariance_factor: DMatrix<f64>,
    beta_star: DVector<f64>,
    mf: MeanFunction,
}

impl SyntheticSpec {
    /// Validate and build. `covariance` is the `N x N` covariance shared by all
    /// coordinates; it must be symmetric positive definite.
    pub fn new(mean_vector: Vec<f64>, covariance: DMatrix<f64>, beta_star: DVector<f64>) -> Result<Self> {
        let n_arms = mean_vector.len();
        let dim = beta_star.len();
        if n_arms < 2 || dim == 0 {
            return Err(Error::Config(format!("need N >= 2 and d >= 1, got N={n_arms}, d={dim}")));
        }
        if covariance.shape() != (n_arms, n_arms) {
            return Err(Error::Config("covariance must be N x N".into()));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 {
            return Err(Error::Config("covariance must be symmetric".into()));
        }
        let covariance_factor = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("covariance must be positive definite".into()))?
            .l();
        if beta_star.iter().chain(mean_vector.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("synthetic parameters must be finite".into()));
        }
        // |x' beta| <= |beta| for unit-ball contexts.
        let mf = logistic_mean().with_radius(beta_star.norm())?;
        Ok(Self {
            n_arms,
            dim,
            mean_vector: DVector::from_vec(mean_vector),
            covariance,
            covariance_factor,
            beta_star,
            mf,
        })
    }

    /// Default means, 0.5 cross-arm correlation.
    pub fn with_defaults(n_arms: usize, beta_star: DVector<f64>) -> Result<Self> {
        Self::new(default_mean_vector(n_arms), equicorrelated(n_arms, 0.5), beta_star)
    }

    pub fn mean_vector(&self) -> &DVector<f64> {
        &self.mean_vector
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

/// Contexts before truncation, row-major `N x d`: for every coordinate the
/// `N` arm values are one draw from `N(mean_vector, covariance)`.
pub fn gen_raw_contexts(spec: &SyntheticSpec, rng: &mut dyn RngCore) -> Vec<f64> {
    let (n, d) = (spec.n_arms, spec.dim);
    let mut out = vec![0.0; n * d];
    let mut z = DVector::zeros(n);
    for j in 0..d {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let col = &spec.mean_vector + &spec.covariance_factor * &z;
        for i in 0..n {
            out[i * d + j] = col[i];
        }
    }
    out
}

/// Draw a context set and map every arm's vector to `x / max(1, |x|)`.
pub fn gen_contexts(spec: &SyntheticSpec, t: usize, rng: &mut dyn RngCore) -> Result<ContextSet> {
    let mut raw = gen_raw_contexts(spec, rng);
    for row in raw.chunks_exact_mut(spec.dim) {
        let norm = dot(row, row).sqrt();
        if norm > 1.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    ContextSet::from_flat(spec.n_arms, spec.dim, raw, t)
}

/// `beta*` with i.i.d. `U(-1, 1)` coordinates.
pub fn gen_beta_star(dim: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

/// A `Ber(mu(x' beta*))` reward.
pub fn sample_reward(spec: &SyntheticSpec, context: &[f64], rng: &mut dyn RngCore) -> f64 {
    let p = spec.mf.mu(dot(context, spec.beta_star.as_slice()));
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// `mu(x_{a*}' beta*) - mu(x_chosen' beta*)`.
pub fn instantaneous_regret(spec: &SyntheticSpec, context_set: &ContextSet, chosen: usize) -> f64 {
    let means: Vec<f64> = context_set
        .predictors(&spec.beta_star)
        .into_iter()
        .map(|z| spec.mf.mu(z))
        .collect();
    let best = means[argmax(&means)];
    (best - means[chosen]).max(0.0)
}

impl Environment for SyntheticSpec {
    fn n_arms(&self) -> usize {
        self.n_arms
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn mean_function(&self) -> MeanFunction {
        self.mf
    }

    fn draw_round(&self, t: usize, rng: &mut dyn RngCore) -> Result<RoundDraw> {
        let contexts = gen_contexts(self, t, rng)?;
        let means = contexts
            .predictors(&self.beta_star)
            .into_iter()
            .map(|z| self.mf.mu(z))
            .collect();
        Ok(RoundDraw {
            contexts,
            means,
            noise: rng.random(),
        })
    }

    fn beta_star(&self) -> Option<&DVector<f64>> {
        Some(&self.beta_star)
    }
}

impl ContextSampler for SyntheticSpec {
    fn sample_contexts(&self, t: usize, rng: &mut dyn RngCore) -> Result<ContextSet> {
        gen_contexts(self, t, rng)
    }
}

/// Contexts drawn independently and uniformly from the unit ball.
#[derive(Debug, Clone, Copy)]
pub struct UniformBall {
    pub n_arms: usize,
    pub dim: usize,
}

impl ContextSampler for UniformBall {
    fn sample_contexts(&self, t: usize, rng: &mut dyn RngCore) -> Result<ContextSet> {
        let d = self.dim;
        let mut data = Vec::with_capacity(self.n_arms * d);
        for _ in 0..self.n_arms {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dot(&dir, &dir).sqrt();
            let radius = rng.random::<f64>().powf(1.0 / d as f64);
            data.extend(dir.iter().map(|v| v / norm * radius));
        }
        ContextSet::from_flat(self.n_arms, d, data, t)
    }
}

/// Always the same context set.
#[derive(Debug, Clone)]
pub struct FixedContexts(pub ContextSet);

impl ContextSampler for FixedContexts {
    fn sample_contexts(&self, _t: usize, _rng: &mut dyn RngCore) -> Result<ContextSet> {
        Ok(self.0.clone())
    }
}

/// Minimum eigenvalue of the empirical `(1/N) sum_i E[x_i x_i']` over
/// `n_samples` context sets.
pub fn min_eigen_diagnostic(sampler: &dyn ContextSampler, n_samples: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let mut acc: Option<DMatrix<f64>> = None;
    let mut rows = 0usize;
    for t in 1..=n_samples {
        let cs = sampler.sample_contexts(t, rng)?;
        let g = weighted_gram(cs.as_slice(), cs.dim(), std::iter::repeat(1.0), 0.0);
        rows += cs.n_arms();
        acc = Some(match acc {
            Some(a) => a + g,
            None => g,
        });
    }
    let avg = acc.expect("n_samples > 0") / rows as f64;
    Ok(avg.symmetric_eigenvalues().min())
}

/// `sum mu'(x' beta*) x x' + lambda I` over a context stack; the analysis-only
/// Gram matrix, available when `beta*` is known.
pub fn oracle_gram(rows: &[f64], dim: usize, beta_star: &DVector<f64>, mf: &MeanFunction, ridge: f64) -> Result<GramMatrix> {
    let weights: Vec<f64> = rows
        .chunks_exact(dim)
        .map(|x| mf.mu_prime(dot(x, beta_star.as_slice())))
        .collect();
    GramMatrix::from_stack(rows, dim, &weights, ridge)
}

/// One logged event. `arm` is 0-based in memory and 1-based on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEvent {
    pub t: usize,
    pub contexts: ContextSet,
    pub arm: usize,
    pub reward: f64,
}

/// Logged events, assumed collected by a uniformly random logger.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayLog {
    pub events: Vec<ReplayEvent>,
    pub logging_policy: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventLine {
    t: usize,
    contexts: Vec<Vec<f64>>,
    arm: usize,
    reward: f64,
}

impl ReplayLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Fraction of logged events with reward 1.
    pub fn click_rate(&self) -> Option<f64> {
        if self.events.is_empty() {
            return None;
        }
        Some(self.events.iter().map(|e| e.reward).sum::<f64>() / self.events.len() as f64)
    }

    /// Parse one JSON object per line. Blank lines are skipped; every other
    /// malformed line is reported with its 1-based line number.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut events = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        for (k, line) in reader.lines().enumerate() {
            let line_no = k + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ingest = |message: String| Error::Ingest { line: line_no, message };
            let raw: EventLine = serde_json::from_str(&line).map_err(|e| ingest(e.to_string()))?;
            let n = raw.contexts.len();
            if raw.t == 0 {
                return Err(ingest("t must be >= 1".into()));
            }
            if raw.arm == 0 || raw.arm > n {
                return Err(ingest(format!("arm {} outside 1..={n}", raw.arm)));
            }
            if raw.reward != 0.0 && raw.reward != 1.0 {
                return Err(ingest(format!("reward must be 0 or 1, got {}", raw.reward)));
            }
            let contexts = ContextSet::new(raw.contexts, raw.t).map_err(|e| ingest(e.to_string()))?;
            let this = (contexts.n_arms(), contexts.dim());
            match shape {
                Some(s) if s != this => {
                    return Err(ingest(format!(
                        "event has {} arms x {} features, earlier events have {} x {}",
                        this.0, this.1, s.0, s.1
                    )))
                }
                _ => shape = Some(this),
            }
            events.push(ReplayEvent {
                t: raw.t,
                contexts,
                arm: raw.arm - 1,
                reward: raw.reward,
            });
        }
        Ok(Self {
            events,
            logging_policy: "uniform".into(),
        })
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for e in &self.events {
            let line = EventLine {
                t: e.t,
                contexts: e.contexts.rows().map(<[f64]>::to_vec).collect(),
                arm: e.arm + 1,
                reward: e.reward,
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `n_events` events from `spec` under a uniform logging policy.
pub fn gen_replay_log(spec: &SyntheticSpec, n_events: usize, rng: &mut dyn RngCore) -> Result<ReplayLog> {
    let mut events = Vec::with_capacity(n_events);
    for t in 1..=n_events {
        let contexts = gen_contexts(spec, t, rng)?;
        let arm = rng.random_range(0..spec.n_arms);
        let reward = sample_reward(spec, contexts.arm(arm), rng);
        events.push(ReplayEvent { t, contexts, arm, reward });
    }
    Ok(ReplayLog {
        events,
        logging_policy: "uniform".into(),
    })
}

/// Outcome of [`replay_evaluate`]. `ctr` is absent when nothing matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub ctr: Option<f64>,
    pub matched: usize,
    pub clicks: usize,
    pub events: usize,
}

/// Rejection-replay evaluation: only rounds where the policy picks the logged
/// arm reveal their reward and update the policy.
pub fn replay_evaluate(log: &ReplayLog, policy: &mut dyn Policy, rng: &mut dyn RngCore) -> Result<ReplayResult> {
    if log.is_empty() {
        return Err(Error::InvalidInput("no events".into()));
    }
    let (mut matched, mut clicks) = (0usize, 0usize);
    for event in &log.events {
        let decision = policy.select(&event.contexts, rng).map_err(|e| e.at_round(event.t))?;
        if decision.arm != event.arm {
            continue;
        }
        matched += 1;
        if event.reward == 1.0 {
            clicks += 1;
        }
        policy
            .observe(&event.contexts, &decision, event.reward)
            .map_err(|e| e.at_round(event.t))?;
    }
    Ok(ReplayResult {
        ctr: (matched > 0).then(|| clicks as f64 / matched as f64),
        matched,
        clicks,
        events: log.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::{Scripted, UniformRandom};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec(n: usize, d: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec::with_defaults(n, gen_beta_star(d, &mut rng(seed))).unwrap()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn default_means() {
        assert_eq!(default_mean_vector(10), vec![-5., -4., -3., -2., -1., 1., 2., 3., 4., 5.]);
        let m20 = default_mean_vector(20);
        assert_eq!(m20.len(), 20);
        assert_eq!((m20[0], m20[9], m20[10], m20[19]), (-10.0, -1.0, 1.0, 10.0));
        assert_eq!(default_mean_vector(3), vec![-1., 0., 1.]);
    }

    #[test]
    fn contexts_are_truncated_and_seeded() {
        let s = spec(10, 5, 1);
        let mut r = rng(3);
        for t in 1..200 {
            let cs = gen_contexts(&s, t, &mut r).unwrap();
            assert!(cs.rows().all(|x| dot(x, x).sqrt() <= 1.0 + 1e-12));
        }
        let a = gen_contexts(&s, 1, &mut rng(42)).unwrap();
        let b = gen_contexts(&s, 1, &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn raw_cross_arm_correlation() {
        let draws = 10_000;
        let correlated = SyntheticSpec::new(vec![0.0; 3], equicorrelated(3, 0.5), DVector::zeros(1)).unwrap();
        let independent = SyntheticSpec::new(vec![0.0; 3], equicorrelated(3, 0.0), DVector::zeros(1)).unwrap();
        let default = spec(10, 1, 0);
        for (s, expected, tol) in [(&correlated, 0.5, 0.05), (&independent, 0.0, 0.05), (&default, 0.5, 0.05)] {
            let mut r = rng(17);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for _ in 0..draws {
                let raw = gen_raw_contexts(s, &mut r);
                a.push(raw[0]);
                b.push(raw[1]);
            }
            assert!((correlation(&a, &b) - expected).abs() < tol);
        }
    }

    #[test]
    fn beta_star_distribution() {
        let b = gen_beta_star(10_000, &mut rng(5));
        assert!(b.iter().all(|v| *v > -1.0 && *v < 1.0));
        assert!(b.mean().abs() < 4.0 * (1.0 / 3.0 / 10_000f64).sqrt());
        assert_eq!(gen_beta_star(4, &mut rng(6)), gen_beta_star(4, &mut rng(6)));
    }

    #[test]
    fn reward_rates() {
        let s = SyntheticSpec::with_defaults(2, DVector::from_vec(vec![10.0, 0.0])).unwrap();
        let n = 100_000;
        let mut r = rng(8);
        let at_zero: f64 = (0..n).map(|_| sample_reward(&s, &[0.0, 1.0], &mut r)).sum::<f64>() / n as f64;
        assert!((at_zero - 0.5).abs() <= 4.0 * (0.25 / n as f64).sqrt());
        let at_ten: f64 = (0..n).map(|_| sample_reward(&s, &[1.0, 0.0], &mut r)).sum::<f64>() / n as f64;
        assert!(at_ten >= 0.999);
        assert!((0..100).all(|_| {
            let y = sample_reward(&s, &[0.3, 0.3], &mut r);
            y == 0.0 || y == 1.0
        }));
    }

    #[test]
    fn regret_examples() {
        let s = SyntheticSpec::with_defaults(2, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let cs = ContextSet::new(vec![vec![0.5, 0.0], vec![-0.2, 0.3]], 1).unwrap();
        assert_eq!(instantaneous_regret(&s, &cs, 0), 0.0);
        let expected = s.mf.mu(0.5) - s.mf.mu(-0.2);
        assert!((instantaneous_regret(&s, &cs, 1) - expected).abs() < 1e-15);

        let draw = RoundDraw {
            contexts: cs,
            means: vec![0.7, 0.4],
            noise: 0.5,
        };
        assert!((draw.regret(1) - 0.3).abs() < 1e-15);
        assert_eq!(draw.regret(0), 0.0);
    }

    #[test]
    fn eigen_diagnostic_examples() {
        let e1 = ContextSet::new(vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]], 1).unwrap();
        let v = min_eigen_diagnostic(&FixedContexts(e1), 10, &mut rng(0)).unwrap();
        assert!(v.abs() < 1e-12);
        let v = min_eigen_diagnostic(&UniformBall { n_arms: 2, dim: 3 }, 20_000, &mut rng(1)).unwrap();
        assert!((v - 0.2).abs() < 0.02);
        assert!(min_eigen_diagnostic(&UniformBall { n_arms: 2, dim: 3 }, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn log_round_trip_and_errors() {
        let s = spec(3, 2, 4);
        let log = gen_replay_log(&s, 25, &mut rng(2)).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = ReplayLog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 25);
        assert_eq!(back.events[3].arm, log.events[3].arm);

        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        lines[16] = r#"{"t": 17, "contexts": [[0.1, 0.1]], "arm": 1, "reward": 1}"#.into();
        match ReplayLog::read_jsonl(lines.join("\n").as_bytes()) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 17),
            other => panic!("expected ingest error, got {other:?}"),
        }
        lines[16] = r#"{"t": 17, "contexts": [[0.1, 0.1],[0.0,0.0],[0.2,0.2]], "arm": 4, "reward": 1}"#.into();
        assert!(matches!(ReplayLog::read_jsonl(lines.join("\n").as_bytes()), Err(Error::Ingest { line: 17, .. })));
        lines[16] = "not json".into();
        assert!(matches!(ReplayLog::read_jsonl(lines.join("\n").as_bytes()), Err(Error::Ingest { line: 17, .. })));
    }

    #[test]
    fn replay_with_logged_arms_matches_everything() {
        let s = spec(4, 3, 9);
        let log = gen_replay_log(&s, 500, &mut rng(10)).unwrap();
        let mut stub = Scripted::new(log.events.iter().map(|e| e.arm).collect());
        let res = replay_evaluate(&log, &mut stub, &mut rng(0)).unwrap();
        assert_eq!(res.matched, 500);
        assert_eq!(res.ctr, log.click_rate());
        assert!(replay_evaluate(&ReplayLog::default(), &mut UniformRandom, &mut rng(0)).is_err());
    }

    #[test]
    fn uniform_replay_matches_one_in_n() {
        let s = spec(4, 3, 9);
        let n = 20_000;
        let log = gen_replay_log(&s, n, &mut rng(10)).unwrap();
        let res = replay_evaluate(&log, &mut UniformRandom, &mut rng(1)).unwrap();
        let p = 0.25;
        assert!((res.matched as f64 - n as f64 * p).abs() <= 4.0 * (n as f64 * p * (1.0 - p)).sqrt());
    }
}
