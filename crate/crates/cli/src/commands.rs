use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rand::seq::SliceRandom;
use serde::Serialize;

use cpq_core::conformal::{build_prediction_set, calibrate_quantile, conformity_score, uniform_tau_grid, CalibrationModel, Candidate};
use cpq_core::estimators::{label_probabilities, EstimatorConfig, GtFallback, LabelProbabilities};
use cpq_core::experiments::{
    run_budget_sweep, run_estimator_eval, sort_rows, synthetic_task, write_curve_csv, write_metrics_csv, DistSpec,
    ExperimentConfig, Variant,
};
use cpq_core::oracle::{load_records, OraclePoint};
use cpq_core::policy::{default_beta_grid, query_point, tune_beta as tune_beta_core, PolicyConfig, QueryMode, DEFAULT_T_MAX, DEFAULT_T_MIN};
use cpq_core::rng::{derive_seed, rng_from_seed};
use cpq_core::{CpqError, Label};

use crate::output::write_atomic;
use crate::{CliError, DataArgs};

type CliResult = Result<(), CliError>;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FallbackArg {
    EmpiricalFrequency,
    Skip,
}

/// Estimator and policy flags shared by the data-driven subcommands.
#[derive(Debug, Clone, Args)]
pub struct TuningArgs {
    /// Minimum queries per input before stopping is considered
    /// [default: max(3, floor(budget / 2))].
    #[arg(long)]
    pub t_min: Option<u64>,
    /// Hard cap on queries per input [default: replay length, or 200 for synthetic data].
    #[arg(long)]
    pub t_max: Option<u64>,
    /// Fallback when the Good–Turing ratio is undefined.
    #[arg(long, value_enum, default_value = "empirical-frequency")]
    pub gt_fallback: FallbackArg,
}

impl TuningArgs {
    fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            gt_fallback: match self.gt_fallback {
                FallbackArg::EmpiricalFrequency => GtFallback::EmpiricalFrequency,
                FallbackArg::Skip => GtFallback::Skip,
            },
            ..EstimatorConfig::default()
        }
    }

    fn t_max(&self, data: &Dataset) -> u64 {
        self.t_max.unwrap_or(data.default_t_max)
    }

    fn adaptive_policy(&self, data: &Dataset, budget: f64) -> Result<PolicyConfig, CliError> {
        let t_max = self.t_max(data);
        let t_min = self
            .t_min
            .unwrap_or_else(|| DEFAULT_T_MIN.max((budget / 2.0).floor() as u64))
            .min(t_max);
        let policy = PolicyConfig { beta_star: 0.0, t_min, t_max, mode: QueryMode::Adaptive };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// `uniform:M` or `geometric:P:M`.
    #[arg(long)]
    pub dist: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 200)]
    pub tmax: u64,
    #[arg(long, env = "CPQ_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated variants: vanilla, p1, p1p2.
    #[arg(long, default_value = "p1p2")]
    pub variant: String,
    /// Comma-separated miscoverage levels.
    #[arg(long, default_value = "0.1")]
    pub alpha: String,
    /// Comma-separated average query budgets.
    #[arg(long, default_value = "20")]
    pub budget: String,
    #[arg(long, default_value_t = 50)]
    pub splits: usize,
    #[arg(long, env = "CPQ_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of uniformly spaced τ values in [0,1] for the threshold-sweep baseline.
    #[arg(long, default_value_t = 101)]
    pub tau_points: usize,
    /// Explicit comma-separated τ grid; overrides --tau-points.
    #[arg(long)]
    pub tau_grid: Option<String>,
    /// Tune β* and calibrate on the same calibration points.
    #[arg(long)]
    pub no_split_cal: bool,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long)]
    pub budget: f64,
    #[arg(long, env = "CPQ_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Tune β* and calibrate on the same points.
    #[arg(long)]
    pub no_split_cal: bool,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// Output model JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Calibration model JSON written by `calibrate`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for synthetic data and oracle draws [default: the model's seed].
    #[arg(long, env = "CPQ_SEED")]
    pub seed: Option<u64>,
    /// Output JSONL, one prediction set per input.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneBetaArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub budget: f64,
    #[arg(long, env = "CPQ_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// Output JSON [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Dataset {
    points: Vec<OraclePoint>,
    default_t_max: u64,
}

fn parse_synthetic(spec: &str) -> Result<usize, CliError> {
    let n = spec.strip_prefix("n=").unwrap_or(spec);
    n.parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("bad synthetic spec {spec:?}, expected n=N")))
}

fn load_data(args: &DataArgs, seed: u64) -> Result<Dataset, CliError> {
    match (&args.data, &args.synthetic) {
        (Some(path), None) => {
            let records = load_records(path).map_err(|e| match e {
                CpqError::Io(io) => CliError::usage(format!("cannot read {}: {io}", path.display())),
                other => CliError::from(other),
            })?;
            let default_t_max = records.iter().map(|r| r.available() as u64).max().unwrap_or(1);
            Ok(Dataset { points: records.into_iter().map(OraclePoint::from).collect(), default_t_max })
        }
        (None, Some(spec)) => {
            Ok(Dataset { points: synthetic_task(parse_synthetic(spec)?, seed), default_t_max: DEFAULT_T_MAX })
        }
        _ => Err(CliError::usage("exactly one of --data or --synthetic is required")),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, raw: &str) -> Result<Vec<T>, CliError> {
    let values = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| CliError::usage(format!("bad value {s:?} for --{flag}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::usage(format!("--{flag} needs at least one value")));
    }
    Ok(values)
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("alpha {alpha} must be in (0,1)")))
    }
}

pub fn estimate(args: EstimateArgs) -> CliResult {
    let spec: DistSpec = args.dist.parse()?;
    if args.trials == 0 || args.tmax == 0 {
        return Err(CliError::usage("--trials and --tmax must be >= 1"));
    }
    let rows = run_estimator_eval(&spec.build()?, args.tmax, args.trials, args.seed)?;
    write_atomic(&args.out, |w| write_curve_csv(w, &rows))
}

pub fn run(args: RunArgs) -> CliResult {
    let variants = parse_list::<Variant>("variant", &args.variant)?;
    let alphas = parse_list::<f64>("alpha", &args.alpha)?;
    alphas.iter().try_for_each(|&a| check_alpha(a))?;
    let budgets = parse_list::<f64>("budget", &args.budget)?;
    let data = load_data(&args.data, args.seed)?;
    let t_max = args.tuning.t_max(&data);
    let tau_grid = match &args.tau_grid {
        Some(raw) => parse_list::<f64>("tau-grid", raw)?,
        None => uniform_tau_grid(args.tau_points),
    };

    let mut rows = Vec::new();
    for variant in variants {
        let config = ExperimentConfig {
            variant,
            alphas: alphas.clone(),
            budget: budgets[0],
            splits: args.splits,
            seed: args.seed,
            estimator: args.tuning.estimator(),
            policy: PolicyConfig { t_max, t_min: DEFAULT_T_MIN.min(t_max), ..PolicyConfig::default() },
            t_min: args.tuning.t_min,
            beta_grid: default_beta_grid(),
            tau_grid: tau_grid.clone(),
            split_calibration: !args.no_split_cal,
        };
        rows.extend(run_budget_sweep(&data.points, &config, &budgets)?);
    }
    sort_rows(&mut rows);
    write_atomic(&args.out, |w| write_metrics_csv(w, &rows))
}

fn split_calibration(points: &[OraclePoint], seed: u64, split: bool) -> (Vec<OraclePoint>, Vec<OraclePoint>) {
    if !split {
        return (points.to_vec(), points.to_vec());
    }
    let mut shuffled = points.to_vec();
    shuffled.shuffle(&mut rng_from_seed(derive_seed(seed, "calibration-split")));
    let second = shuffled.split_off(shuffled.len() / 2);
    (shuffled, second)
}

fn probabilities(point: &OraclePoint, policy: &PolicyConfig, estimator: &EstimatorConfig, stream: u64) -> Result<(LabelProbabilities, u64), CliError> {
    let tally = query_point(point, policy, stream)?;
    let probs = if tally.is_empty() {
        LabelProbabilities::all_unseen()
    } else {
        label_probabilities(&tally, estimator)?
    };
    Ok((probs, tally.total()))
}

pub fn calibrate(args: CalibrateArgs) -> CliResult {
    check_alpha(args.alpha)?;
    let data = load_data(&args.data, args.seed)?;
    let split = !args.no_split_cal;
    if data.points.len() < if split { 2 } else { 1 } {
        return Err(CliError::usage("not enough calibration points"));
    }
    let defaults = args.tuning.adaptive_policy(&data, args.budget)?;
    let estimator = args.tuning.estimator();
    let (tuning_set, scoring_set) = split_calibration(&data.points, args.seed, split);

    let tuned = tune_beta_core(&tuning_set, args.budget, &default_beta_grid(), &defaults, derive_seed(args.seed, "tune"))?;
    let policy = PolicyConfig { beta_star: tuned.beta_star, ..defaults };
    let stream = derive_seed(args.seed, "calibrate");
    let scores = scoring_set
        .iter()
        .map(|p| {
            let (probs, _) = probabilities(p, &policy, &estimator, stream)?;
            Ok(conformity_score(&probs, Candidate::Seen(p.truth)))
        })
        .collect::<Result<Vec<f64>, CliError>>()?;
    let q_star = calibrate_quantile(&scores, args.alpha)?;

    let model = CalibrationModel::new(args.alpha, q_star, estimator, policy, args.seed);
    write_atomic(&args.out, |w| writeln!(w, "{}", model.to_json()))
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    set: Vec<Label>,
    ee: bool,
    covered: bool,
}

pub fn predict(args: PredictArgs) -> CliResult {
    let model = CalibrationModel::load(&args.model).map_err(|e| match e {
        CpqError::Io(io) => CliError::usage(format!("cannot read {}: {io}", args.model.display())),
        other => CliError::from(other),
    })?;
    let seed = args.seed.unwrap_or(model.seed);
    let data = load_data(&args.data, seed)?;
    let policy = model.query_policy();
    policy.validate()?;
    let stream = derive_seed(seed, "predict");

    let mut lines = Vec::with_capacity(data.points.len());
    for p in &data.points {
        let (probs, _) = probabilities(p, &policy, &model.estimator, stream)?;
        let set = build_prediction_set(&probs, model.q_star);
        let line = PredictionLine { id: &p.id, set: set.labels.iter().copied().collect(), ee: set.includes_ee, covered: set.covers(p.truth) };
        lines.push(serde_json::to_string(&line).expect("prediction serializes"));
    }
    write_atomic(&args.out, |w| lines.iter().try_for_each(|l| writeln!(w, "{l}")))
}

#[derive(Serialize)]
struct TuneCandidate {
    beta: f64,
    avg_queries: f64,
}

#[derive(Serialize)]
struct TuneReport {
    beta_star: f64,
    avg_queries: f64,
    budget: f64,
    t_min: u64,
    t_max: u64,
    candidates: Vec<TuneCandidate>,
}

pub fn tune_beta(args: TuneBetaArgs) -> CliResult {
    let data = load_data(&args.data, args.seed)?;
    let defaults = args.tuning.adaptive_policy(&data, args.budget)?;
    let tuned = tune_beta_core(&data.points, args.budget, &default_beta_grid(), &defaults, derive_seed(args.seed, "tune"))?;
    let report = TuneReport {
        beta_star: tuned.beta_star,
        avg_queries: tuned.avg_queries,
        budget: args.budget,
        t_min: defaults.t_min,
        t_max: defaults.t_max,
        candidates: tuned.candidates.iter().map(|&(beta, avg_queries)| TuneCandidate { beta, avg_queries }).collect(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(path) => write_atomic(path, |w| writeln!(w, "{json}")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}
