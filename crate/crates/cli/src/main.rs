use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glb_core::environments::{gen_replay_log, min_eigen_diagnostic, replay_evaluate, ReplayLog, UniformBall};
use glb_core::glm::MeanFunction;
use glb_core::harness::{run_experiment, stream_rng, EnvironmentConfig, ExperimentConfig};
use glb_core::policies::{Policy, PolicySpec, Scripted};
use glb_core::Error;
use serde::Serialize;

/// Generalized linear contextual bandit simulations and replay evaluation.
#[derive(Parser, Debug)]
#[command(name = "glb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tune and evaluate policies on the synthetic environment.
    Simulate(SimulateArgs),
    /// Replay-evaluate a policy on a logged JSONL file.
    Replay(ReplayArgs),
    /// Estimate the minimum eigenvalue of E[x x^T] for a context sampler.
    Diagnose(DiagnoseArgs),
    /// Write a uniformly logged synthetic JSONL event log.
    GenLog(GenLogArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum concurrent runs (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    /// Always replays the logged arm.
    Logged,
    Uniform,
    Ddrts,
    GlmUcb,
    TsGlm,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// JSONL log, one `{"t", "contexts", "arm", "reward"}` object per line.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, value_enum, default_value = "ddrts", conflicts_with = "config")]
    policy: PolicyKind,
    /// Exploration parameter (`v` or `alpha`) for the chosen policy.
    #[arg(long)]
    exploration: Option<f64>,
    /// Full policy spec (JSON), instead of `--policy`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inverse link of the reward model.
    #[arg(long, default_value = "logistic")]
    link: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `replay.csv` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SamplerKind {
    UniformBall,
    Synthetic,
}

#[derive(Args, Debug)]
struct EnvArgs {
    /// Synthetic environment config (JSON); overrides `--arms`/`--dim`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    arms: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EnvArgs {
    fn environment(&self) -> Result<EnvironmentConfig, CliError> {
        match &self.config {
            Some(path) => read_json(path),
            None => Ok(EnvironmentConfig::new(self.arms, self.dim)),
        }
    }
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long, value_enum, default_value = "uniform-ball")]
    sampler: SamplerKind,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[command(flatten)]
    env: EnvArgs,
    /// Write `diagnose.csv` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct GenLogArgs {
    #[arg(long, default_value_t = 100_000)]
    events: usize,
    #[command(flatten)]
    env: EnvArgs,
    /// Destination JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dry_run: bool,
}

/// A failure with its process exit code: 1 for runtime or data errors,
/// 2 for usage and configuration errors.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut config: ExperimentConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    let out = config.output.clone().unwrap_or_else(|| PathBuf::from("glb-out"));
    config.output = Some(out.clone());
    config.validate()?;
    if args.dry_run {
        return print_json(&config);
    }
    let jobs = match args.jobs {
        Some(0) => return Err(CliError::usage("--jobs must be >= 1")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let report = run_experiment(&config, jobs)?;
    report.write_artifacts(&out)?;
    for p in &report.policies {
        let f = &p.aggregate.final_stats;
        println!(
            "{:<8} exploration={:<6} R({})={:.3} sd={:.3}",
            p.tuning.policy,
            p.tuning.best.exploration().map_or("-".to_string(), |v| v.to_string()),
            f.round,
            f.mean,
            f.sd
        );
    }
    log::info!("artifacts written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReplaySummary {
    policy: String,
    seed: u64,
    events: usize,
    matched: usize,
    clicks: usize,
    ctr: Option<f64>,
    log_click_rate: Option<f64>,
}

fn replay_policy(args: &ReplayArgs, log: &ReplayLog) -> Result<(String, Box<dyn Policy>), CliError> {
    let first = log.events.first().ok_or_else(|| CliError::runtime("no events"))?;
    let (n_arms, dim) = (first.contexts.n_arms(), first.contexts.dim());
    let spec = match (&args.config, args.policy) {
        (Some(path), _) => read_json::<PolicySpec>(path)?,
        (None, PolicyKind::Logged) => {
            let arms = log.events.iter().map(|e| e.arm).collect();
            return Ok(("logged".into(), Box::new(Scripted::new(arms))));
        }
        (None, PolicyKind::Uniform) => PolicySpec::Uniform,
        (None, PolicyKind::Ddrts) => PolicySpec::ddrts(0.01),
        (None, PolicyKind::GlmUcb) => PolicySpec::glm_ucb(0.01),
        (None, PolicyKind::TsGlm) => PolicySpec::ts_glm(0.01),
    };
    let spec = match args.exploration {
        Some(x) if spec.exploration().is_some() => spec.with_exploration(x),
        Some(_) => return Err(CliError::usage("--exploration does not apply to this policy")),
        None => spec,
    };
    let mf = MeanFunction::by_name(&args.link, 1.0).map_err(|e| CliError::usage(e.to_string()))?;
    let policy = spec.build(n_arms, dim, mf).map_err(|e| CliError::usage(e.to_string()))?;
    Ok((spec.label().to_string(), policy))
}

fn cmd_replay(args: &ReplayArgs) -> Result<(), CliError> {
    let file = fs::File::open(&args.log)
        .map_err(|e| CliError::runtime(format!("cannot open log {}: {e}", args.log.display())))?;
    let log = ReplayLog::read_jsonl(BufReader::new(file))?;
    if log.is_empty() {
        return Err(CliError::runtime("no events"));
    }
    let (name, mut policy) = replay_policy(args, &log)?;
    if args.dry_run {
        println!("replay {} events with policy {name} (seed {})", log.len(), args.seed);
        return Ok(());
    }
    let result = replay_evaluate(&log, policy.as_mut(), &mut stream_rng(args.seed, 1))?;
    let summary = ReplaySummary {
        policy: name,
        seed: args.seed,
        events: result.events,
        matched: result.matched,
        clicks: result.clicks,
        ctr: result.ctr,
        log_click_rate: log.click_rate(),
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let mut w = csv::Writer::from_path(dir.join("replay.csv")).map_err(|e| CliError::runtime(e.to_string()))?;
        w.serialize(&summary).map_err(|e| CliError::runtime(e.to_string()))?;
        w.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    }
    print_json(&summary)
}

#[derive(Serialize)]
struct DiagnoseSummary {
    sampler: String,
    n_arms: usize,
    dim: usize,
    samples: usize,
    seed: u64,
    min_eigenvalue: f64,
    /// `1 / (d + 2)` for the uniform ball.
    expected: Option<f64>,
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    if args.samples == 0 {
        return Err(CliError::usage("--samples must be >= 1"));
    }
    let env = args.env.environment()?;
    if args.dry_run {
        println!("diagnose {:?} with {} samples (seed {})", args.sampler, args.samples, args.env.seed);
        return print_json(&env);
    }
    let mut rng = stream_rng(args.env.seed, 0);
    let (name, value, expected) = match args.sampler {
        SamplerKind::UniformBall => {
            if env.dim == 0 || env.n_arms == 0 {
                return Err(CliError::usage("--arms and --dim must be >= 1"));
            }
            let sampler = UniformBall { n_arms: env.n_arms, dim: env.dim };
            let value = min_eigen_diagnostic(&sampler, args.samples, &mut rng)?;
            ("uniform_ball", value, Some(1.0 / (env.dim as f64 + 2.0)))
        }
        SamplerKind::Synthetic => {
            let spec = env.build(args.env.seed, args.env.seed)?;
            ("synthetic", min_eigen_diagnostic(&spec, args.samples, &mut rng)?, None)
        }
    };
    let summary = DiagnoseSummary {
        sampler: name.into(),
        n_arms: env.n_arms,
        dim: env.dim,
        samples: args.samples,
        seed: args.env.seed,
        min_eigenvalue: value,
        expected,
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let mut w = csv::Writer::from_path(dir.join("diagnose.csv")).map_err(|e| CliError::runtime(e.to_string()))?;
        w.serialize(&summary).map_err(|e| CliError::runtime(e.to_string()))?;
        w.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    }
    print_json(&summary)
}

fn cmd_gen_log(args: &GenLogArgs) -> Result<(), CliError> {
    if args.events == 0 {
        return Err(CliError::usage("--events must be >= 1"));
    }
    let env = args.env.environment()?;
    let spec = env.build(args.env.seed, args.env.seed)?;
    if args.dry_run {
        println!("gen-log {} events to {} (seed {})", args.events, args.out.display(), args.env.seed);
        return print_json(&env);
    }
    let log = gen_replay_log(&spec, args.events, &mut stream_rng(args.env.seed, 0))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = fs::File::create(&args.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let mut writer = io::BufWriter::new(file);
    log.write_jsonl(&mut writer)?;
    writer.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "wrote {} events to {} (click rate {:.4})",
        log.len(),
        args.out.display(),
        log.click_rate().unwrap_or(0.0)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLB_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::GenLog(a) => cmd_gen_log(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
