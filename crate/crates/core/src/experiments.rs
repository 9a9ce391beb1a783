//! Experiment harness: estimator-accuracy curves, split-based evaluation of
//! the three pipeline variants, and budget sweeps. Output is CSV.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{build_prediction_set, calibrate_quantile, conformity_score, uniform_tau_grid, vanilla_build_set, vanilla_calibrate, Candidate, PredictionSet};
use crate::distributions::{exact_derivative, exact_missing_mass, make_geometric, make_uniform, DiscreteDistribution};
use crate::error::{CpqError, Result};
use crate::estimators::{gt_derivative, gt_missing_mass, label_probabilities, naive_derivative, EstimatorConfig, LabelProbabilities};
use crate::oracle::OraclePoint;
use crate::policy::{default_beta_grid, query_point, tune_beta, PolicyConfig, QueryMode, DEFAULT_T_MIN};
use crate::rng::{derive_seed, derive_seed_u64, rng_from_seed};
use crate::tally::Tally;
use crate::Label;

pub const METRICS_HEADER: &str =
    "variant,alpha,budget,coverage_mean,coverage_std,ee_frac_mean,ee_frac_std,setsize_mean,setsize_std,queries_mean,queries_std";
pub const CURVE_HEADER: &str =
    "t,exact_mm,gt_mm_mean,gt_mm_std,exact_deriv,doubleton_mean,doubleton_std,naive_mean,naive_std";

/// Pipeline variants compared in the component-wise evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Fixed query count per input, threshold-sweep calibration.
    Vanilla,
    /// Adaptive querying, threshold-sweep calibration.
    P1,
    /// Adaptive querying, EE-augmented conformal calibration.
    P1p2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::P1, Variant::P1p2];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::P1 => "p1",
            Variant::P1p2 => "p1p2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CpqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Variant::Vanilla),
            "p1" => Ok(Variant::P1),
            "p1p2" | "p1+p2" | "cpq" => Ok(Variant::P1p2),
            other => Err(CpqError::InvalidParameter(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub alphas: Vec<f64>,
    /// Average query budget per input.
    pub budget: f64,
    pub splits: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    /// Supplies `t_max`; `beta_star` and `mode` are set per variant and
    /// `t_min` by [`ExperimentConfig::t_min`].
    pub policy: PolicyConfig,
    /// Minimum queries per input for the adaptive variants. `None` warms up
    /// with half the budget (at least [`DEFAULT_T_MIN`]).
    pub t_min: Option<u64>,
    pub beta_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    /// Tune β and calibrate on disjoint halves of the calibration split.
    pub split_calibration: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::P1p2,
            alphas: vec![0.1],
            budget: 20.0,
            splits: 50,
            seed: 0,
            estimator: EstimatorConfig::default(),
            policy: PolicyConfig::default(),
            t_min: None,
            beta_grid: default_beta_grid(),
            tau_grid: uniform_tau_grid(101),
            split_calibration: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(CpqError::InvalidParameter("splits must be >= 1".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(CpqError::InvalidParameter("alphas must be non-empty and within (0,1)".into()));
        }
        if !(self.budget.is_finite() && self.budget >= 1.0) {
            return Err(CpqError::InvalidParameter(format!("budget {} must be >= 1", self.budget)));
        }
        Ok(())
    }

    /// `t_min` used by the adaptive variants.
    pub fn effective_t_min(&self) -> u64 {
        self.t_min
            .unwrap_or_else(|| DEFAULT_T_MIN.max((self.budget / 2.0).floor() as u64))
            .min(self.policy.t_max)
    }
}

/// Aggregated metrics for one `(variant, alpha, budget)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: Variant,
    pub alpha: f64,
    pub budget: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub ee_frac_mean: f64,
    pub ee_frac_std: f64,
    pub setsize_mean: f64,
    pub setsize_std: f64,
    pub queries_mean: f64,
    pub queries_std: f64,
}

/// Test-set metrics of one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub coverage: f64,
    pub ee_fraction: f64,
    pub avg_set_size: f64,
    pub avg_queries: f64,
}

/// Metrics over `(set, truth, queries)` triples.
pub fn evaluate_sets<'a, I>(outcomes: I) -> SplitMetrics
where
    I: IntoIterator<Item = (&'a PredictionSet, Label, u64)>,
{
    let (mut n, mut covered, mut ee, mut size, mut queries) = (0usize, 0usize, 0usize, 0usize, 0u64);
    for (set, truth, q) in outcomes {
        n += 1;
        covered += usize::from(set.covers(truth));
        ee += usize::from(set.includes_ee);
        size += set.size();
        queries += q;
    }
    let n = n.max(1) as f64;
    SplitMetrics {
        coverage: covered as f64 / n,
        ee_fraction: ee as f64 / n,
        avg_set_size: size as f64 / n,
        avg_queries: queries as f64 / n,
    }
}

/// Sample mean and 1-sigma sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-point outcome of the query stage.
struct Queried {
    truth: Label,
    probs: LabelProbabilities,
    queries: u64,
}

fn query_all(points: &[&OraclePoint], policy: &PolicyConfig, estimator: &EstimatorConfig, stream: u64) -> Result<Vec<Queried>> {
    points
        .iter()
        .map(|p| {
            let tally = query_point(p, policy, stream)?;
            let probs = if tally.is_empty() {
                LabelProbabilities::all_unseen()
            } else {
                label_probabilities(&tally, estimator)?
            };
            Ok(Queried { truth: p.truth, probs, queries: tally.total() })
        })
        .collect()
}

fn truth_score(q: &Queried) -> f64 {
    conformity_score(&q.probs, Candidate::Seen(q.truth))
}

/// Runs one split and returns metrics for every alpha in `config.alphas`.
fn run_one_split(points: &[OraclePoint], config: &ExperimentConfig, split: usize) -> Result<Vec<SplitMetrics>> {
    let split_seed = derive_seed_u64(derive_seed(config.seed, "split"), split as u64);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng_from_seed(split_seed));
    let half = points.len() / 2;
    let cal: Vec<&OraclePoint> = order[..half].iter().map(|&i| &points[i]).collect();
    let test: Vec<&OraclePoint> = order[half..].iter().map(|&i| &points[i]).collect();

    let query_stream = derive_seed(split_seed, "query");
    let policy = match config.variant {
        Variant::Vanilla => PolicyConfig { mode: QueryMode::Fixed(config.budget.floor() as u64), ..config.policy },
        Variant::P1 | Variant::P1p2 => {
            let tuning_set: Vec<OraclePoint> = if config.split_calibration {
                cal[..cal.len() / 2].iter().map(|p| (*p).clone()).collect()
            } else {
                cal.iter().map(|p| (*p).clone()).collect()
            };
            let defaults = PolicyConfig { mode: QueryMode::Adaptive, t_min: config.effective_t_min(), ..config.policy };
            let tuned = tune_beta(&tuning_set, config.budget, &config.beta_grid, &defaults, derive_seed(split_seed, "tune"))?;
            PolicyConfig { beta_star: tuned.beta_star, ..defaults }
        }
    };
    let calibration: &[&OraclePoint] = match config.variant {
        Variant::Vanilla => &cal,
        _ if config.split_calibration => &cal[cal.len() / 2..],
        _ => &cal,
    };

    let cal_q = query_all(calibration, &policy, &config.estimator, query_stream)?;
    let test_q = query_all(&test, &policy, &config.estimator, query_stream)?;

    config
        .alphas
        .iter()
        .map(|&alpha| {
            let sets: Vec<PredictionSet> = match config.variant {
                Variant::P1p2 => {
                    let scores: Vec<f64> = cal_q.iter().map(truth_score).collect();
                    let q_star = calibrate_quantile(&scores, alpha)?;
                    test_q.iter().map(|q| build_prediction_set(&q.probs, q_star)).collect()
                }
                Variant::Vanilla | Variant::P1 => {
                    let pairs: Vec<(LabelProbabilities, Label)> =
                        cal_q.iter().map(|q| (q.probs.clone(), q.truth)).collect();
                    let tau = vanilla_calibrate(&pairs, alpha, &config.tau_grid)?;
                    test_q.iter().map(|q| vanilla_build_set(&q.probs, tau)).collect()
                }
            };
            Ok(evaluate_sets(sets.iter().zip(&test_q).map(|(s, q)| (s, q.truth, q.queries))))
        })
        .collect()
}

/// Averages metrics over `config.splits` random 50:50 calibration/test splits.
pub fn run_split_experiment(points: &[OraclePoint], config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    let min_points = if config.split_calibration { 4 } else { 2 };
    if points.len() < min_points {
        return Err(CpqError::InvalidInput(format!(
            "need at least {min_points} points, got {}",
            points.len()
        )));
    }
    let per_split = (0..config.splits)
        .into_par_iter()
        .map(|s| run_one_split(points, config, s))
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<MetricsRow> = config
        .alphas
        .iter()
        .enumerate()
        .map(|(ai, &alpha)| {
            let col = |f: fn(&SplitMetrics) -> f64| -> (f64, f64) {
                mean_std(&per_split.iter().map(|m| f(&m[ai])).collect::<Vec<_>>())
            };
            let (coverage_mean, coverage_std) = col(|m| m.coverage);
            let (ee_frac_mean, ee_frac_std) = col(|m| m.ee_fraction);
            let (setsize_mean, setsize_std) = col(|m| m.avg_set_size);
            let (queries_mean, queries_std) = col(|m| m.avg_queries);
            MetricsRow {
                variant: config.variant,
                alpha,
                budget: config.budget,
                coverage_mean,
                coverage_std,
                ee_frac_mean,
                ee_frac_std,
                setsize_mean,
                setsize_std,
                queries_mean,
                queries_std,
            }
        })
        .collect();
    sort_rows(&mut rows);
    Ok(rows)
}

/// Runs [`run_split_experiment`] once per budget.
pub fn run_budget_sweep(points: &[OraclePoint], config: &ExperimentConfig, budgets: &[f64]) -> Result<Vec<MetricsRow>> {
    if budgets.is_empty() {
        return Err(CpqError::InvalidParameter("no budgets given".into()));
    }
    let mut rows = Vec::new();
    for &budget in budgets {
        rows.extend(run_split_experiment(points, &ExperimentConfig { budget, ..config.clone() })?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Orders rows by budget, variant, then alpha.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        a.budget
            .total_cmp(&b.budget)
            .then(a.variant.cmp(&b.variant))
            .then(a.alpha.total_cmp(&b.alpha))
    });
}

/// Folds `-0.0` into `0.0` so CSV cells never read "-0".
fn cell(v: f64) -> f64 {
    v + 0.0
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.alpha,
            r.budget,
            cell(r.coverage_mean),
            cell(r.coverage_std),
            cell(r.ee_frac_mean),
            cell(r.ee_frac_std),
            cell(r.setsize_mean),
            cell(r.setsize_std),
            cell(r.queries_mean),
            cell(r.queries_std)
        )?;
    }
    Ok(())
}

/// A synthetic distribution family, parsed from `uniform:M` or `geometric:P:M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistSpec {
    Uniform(usize),
    Geometric(f64, usize),
}

impl DistSpec {
    pub fn build(&self) -> Result<DiscreteDistribution> {
        match *self {
            DistSpec::Uniform(m) => make_uniform(m),
            DistSpec::Geometric(p, m) => make_geometric(p, m),
        }
    }
}

impl FromStr for DistSpec {
    type Err = CpqError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CpqError::InvalidParameter(format!("bad distribution spec {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["uniform", m] => DistSpec::Uniform(m.parse().map_err(|_| bad())?),
            ["geometric", p, m] => DistSpec::Geometric(p.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        spec.build()?;
        Ok(spec)
    }
}

/// One row of the estimator-accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: u64,
    pub exact_mm: f64,
    pub gt_mm_mean: f64,
    pub gt_mm_std: f64,
    pub exact_deriv: f64,
    pub doubleton_mean: f64,
    pub doubleton_std: f64,
    pub naive_mean: f64,
    pub naive_std: f64,
}

/// Per-trial estimator traces for `t = 1..=t_max`.
#[derive(Debug, Clone)]
pub struct EstimatorTraces {
    /// `[trial][t-1]`
    pub gt_mm: Vec<Vec<f64>>,
    pub doubleton: Vec<Vec<f64>>,
    pub naive: Vec<Vec<f64>>,
}

/// Draws `trials` independent streams of `t_max + 1` samples and records the
/// estimators along each stream.
pub fn estimator_traces(dist: &DiscreteDistribution, t_max: u64, trials: usize, seed: u64) -> Result<EstimatorTraces> {
    if trials == 0 {
        return Err(CpqError::InvalidParameter("trials must be >= 1".into()));
    }
    let per_trial: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng_from_seed(derive_seed_u64(seed, trial as u64));
            let mut tally = Tally::new();
            tally.push(dist.sample(&mut rng));
            let mut mm = Vec::with_capacity(t_max as usize);
            let mut dd = Vec::with_capacity(t_max as usize);
            let mut nv = Vec::with_capacity(t_max as usize);
            for _ in 1..=t_max {
                let now = gt_missing_mass(&tally)?;
                dd.push(gt_derivative(&tally)?);
                tally.push(dist.sample(&mut rng));
                let next = gt_missing_mass(&tally)?;
                mm.push(now);
                nv.push(naive_derivative(now, next));
            }
            Ok((mm, dd, nv))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut traces = EstimatorTraces { gt_mm: Vec::new(), doubleton: Vec::new(), naive: Vec::new() };
    for (mm, dd, nv) in per_trial {
        traces.gt_mm.push(mm);
        traces.doubleton.push(dd);
        traces.naive.push(nv);
    }
    Ok(traces)
}

/// Estimator-accuracy table for `t = 1..=t_max`.
pub fn run_estimator_eval(dist: &DiscreteDistribution, t_max: u64, trials: usize, seed: u64) -> Result<Vec<CurveRow>> {
    let traces = estimator_traces(dist, t_max, trials, seed)?;
    let column = |rows: &[Vec<f64>], i: usize| mean_std(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
    Ok((1..=t_max)
        .map(|t| {
            let i = (t - 1) as usize;
            let (gt_mm_mean, gt_mm_std) = column(&traces.gt_mm, i);
            let (doubleton_mean, doubleton_std) = column(&traces.doubleton, i);
            let (naive_mean, naive_std) = column(&traces.naive, i);
            CurveRow {
                t,
                exact_mm: exact_missing_mass(dist, t),
                gt_mm_mean,
                gt_mm_std,
                exact_deriv: exact_derivative(dist, t),
                doubleton_mean,
                doubleton_std,
                naive_mean,
                naive_std,
            }
        })
        .collect())
}

pub fn write_curve_csv<W: Write>(mut w: W, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            cell(r.exact_mm),
            cell(r.gt_mm_mean),
            cell(r.gt_mm_std),
            cell(r.exact_deriv),
            cell(r.doubleton_mean),
            cell(r.doubleton_std),
            cell(r.naive_mean),
            cell(r.naive_std)
        )?;
    }
    Ok(())
}

/// Seeded synthetic benchmark in which each input's oracle and label
/// distribution coincide. Inputs mix three regimes:
///
/// * peaked: geometric with `p ∈ [0.4, 0.9)` on 20 labels,
/// * moderate: geometric with `p ∈ [0.08, 0.25)` on 60 labels,
/// * diffuse: uniform on 40–200 labels.
///
/// The truth is one draw from the same distribution.
pub fn synthetic_task(n: usize, seed: u64) -> Vec<OraclePoint> {
    (0..n)
        .map(|i| {
            let id = format!("syn-{i:05}");
            let mut rng = crate::rng::input_rng(derive_seed(seed, "synthetic"), &id);
            let regime: f64 = rng.gen();
            let dist = if regime < 0.4 {
                make_geometric(rng.gen_range(0.4..0.9), 20)
            } else if regime < 0.75 {
                make_geometric(rng.gen_range(0.08..0.25), 60)
            } else {
                make_uniform(rng.gen_range(40..=200))
            }
            .expect("parameters are in range");
            let truth = dist.sample(&mut rng);
            OraclePoint::synthetic(id, truth, dist)
        })
        .collect()
}
