//! Query policies.
//!
//! The adaptive policy keeps querying an input while the estimated marginal
//! reduction in missing mass is at least `|β*|`, i.e. it stops at the first
//! `t ≥ t_min` with `Δ̂(t) > β*`. `β*` is tuned on a calibration split so the
//! average number of queries meets a budget. [`greedy_allocate`] is the exact
//! counterpart on known distributions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{exact_derivative, DiscreteDistribution};
use crate::error::{CpqError, Result};
use crate::estimators::gt_derivative;
use crate::oracle::{LabelSource, OraclePoint};
use crate::rng::{derive_seed_u64, CpqRng};
use crate::tally::Tally;

pub const DEFAULT_T_MIN: u64 = 3;
pub const DEFAULT_T_MAX: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "queries")]
pub enum QueryMode {
    Adaptive,
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Derivative threshold, `≤ 0`.
    pub beta_star: f64,
    pub t_min: u64,
    pub t_max: u64,
    pub mode: QueryMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { beta_star: 0.0, t_min: DEFAULT_T_MIN, t_max: DEFAULT_T_MAX, mode: QueryMode::Adaptive }
    }
}

impl PolicyConfig {
    pub fn adaptive(beta_star: f64) -> Self {
        Self { beta_star, ..Self::default() }
    }

    pub fn fixed(queries: u64) -> Self {
        Self { mode: QueryMode::Fixed(queries), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_star <= 0.0) {
            return Err(CpqError::InvalidParameter(format!("beta_star {} must be <= 0", self.beta_star)));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(CpqError::InvalidParameter(format!(
                "need 1 <= t_min ({}) <= t_max ({})",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    /// Adaptive stopping predicate evaluated on the current tally.
    pub fn should_stop(&self, tally: &Tally) -> bool {
        let t = tally.total();
        if t >= self.t_max {
            return true;
        }
        t >= self.t_min && gt_derivative(tally).is_ok_and(|d| d > self.beta_star)
    }
}

/// Queries one input under `config` and returns the resulting tally.
///
/// An exhausted replay source ends the loop early without error.
pub fn run_query_loop<S: LabelSource + ?Sized>(
    source: &mut S,
    config: &PolicyConfig,
    rng: &mut CpqRng,
) -> Result<Tally> {
    config.validate()?;
    let mut tally = Tally::new();
    loop {
        let done = match config.mode {
            QueryMode::Fixed(n) => tally.total() >= n,
            QueryMode::Adaptive => config.should_stop(&tally),
        };
        if done || source.remaining() == Some(0) {
            break;
        }
        match source.next_label(rng) {
            Ok(y) => tally.push(y),
            Err(CpqError::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(tally)
}

/// Queries a point with its own derived RNG stream.
pub fn query_point(point: &OraclePoint, config: &PolicyConfig, stream_seed: u64) -> Result<Tally> {
    let mut rng = crate::rng::input_rng(stream_seed, &point.id);
    run_query_loop(&mut point.source(), config, &mut rng)
}

/// Default β grid: 39 log-spaced values over `[−1, −1e−6]` followed by 0,
/// sorted ascending.
pub fn default_beta_grid() -> Vec<f64> {
    let n = 39;
    let mut grid: Vec<f64> = (0..n)
        .map(|i| -(10f64.powf(-6.0 * i as f64 / (n - 1) as f64)))
        .collect();
    grid.push(0.0);
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTuning {
    pub beta_star: f64,
    /// Average queries induced by the selected candidate.
    pub avg_queries: f64,
    /// `(β, average queries)` for every grid candidate.
    pub candidates: Vec<(f64, f64)>,
}

/// Picks the grid β whose average query count over `points` is the largest
/// one still within `budget`; falls back to the cheapest candidate when none
/// fits. Each candidate gets fresh draws from seeds derived from `seed`.
pub fn tune_beta(
    points: &[OraclePoint],
    budget: f64,
    grid: &[f64],
    defaults: &PolicyConfig,
    seed: u64,
) -> Result<BetaTuning> {
    if points.is_empty() {
        return Err(CpqError::InvalidInput("empty calibration split".into()));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(CpqError::InvalidParameter("beta grid must be non-empty and sorted".into()));
    }
    if budget < defaults.t_min as f64 {
        return Err(CpqError::InvalidParameter(format!(
            "budget {budget} below t_min {}",
            defaults.t_min
        )));
    }

    let candidates = grid
        .par_iter()
        .enumerate()
        .map(|(idx, &beta)| {
            let config = PolicyConfig { beta_star: beta, mode: QueryMode::Adaptive, ..*defaults };
            let stream = derive_seed_u64(seed, idx as u64);
            let total: u64 = points
                .iter()
                .map(|p| query_point(p, &config, stream).map(|t| t.total()))
                .sum::<Result<u64>>()?;
            Ok((beta, total as f64 / points.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;

    let feasible = candidates
        .iter()
        .filter(|(_, avg)| *avg <= budget)
        .fold(None::<(f64, f64)>, |best, &c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        });
    let (beta_star, avg_queries) = feasible.unwrap_or_else(|| {
        candidates
            .iter()
            .copied()
            .fold((f64::NAN, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
    });
    Ok(BetaTuning { beta_star, avg_queries, candidates })
}

/// Result of [`greedy_allocate_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyAllocation {
    pub counts: Vec<u64>,
    /// Exact derivative of the last query handed out, `None` for zero budget.
    pub last_gain: Option<f64>,
}

/// Hands out `budget` queries one at a time to the input whose next query
/// reduces exact missing mass the most (ties to the lowest index).
pub fn greedy_allocate(dists: &[DiscreteDistribution], budget: u64) -> Vec<u64> {
    greedy_allocate_traced(dists, budget).counts
}

pub fn greedy_allocate_traced(dists: &[DiscreteDistribution], budget: u64) -> GreedyAllocation {
    let mut counts = vec![0u64; dists.len()];
    let mut gains: Vec<f64> = dists.iter().map(|d| exact_derivative(d, 0)).collect();
    let mut last_gain = None;
    if dists.is_empty() {
        return GreedyAllocation { counts, last_gain };
    }
    for _ in 0..budget {
        let (best, gain) = gains
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (i, g)| if g < b.1 { (i, g) } else { b });
        counts[best] += 1;
        gains[best] = exact_derivative(&dists[best], counts[best]);
        last_gain = Some(gain);
    }
    GreedyAllocation { counts, last_gain }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{exact_missing_mass, make_uniform};
    use crate::oracle::{QueryRecord, SyntheticSource};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn point_mass() -> DiscreteDistribution {
        DiscreteDistribution::new(vec![1.0]).unwrap()
    }

    #[test]
    fn fixed_budget_on_point_mass() {
        let d = point_mass();
        let mut rng = rng_from_seed(0);
        let tally = run_query_loop(&mut SyntheticSource::new(&d), &PolicyConfig::fixed(5), &mut rng).unwrap();
        assert_eq!(tally.total(), 5);
        assert_eq!(tally.count(0), 5);
    }

    #[test]
    fn very_negative_threshold_stops_at_t_min() {
        let d = make_uniform(100).unwrap();
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let tally =
                run_query_loop(&mut SyntheticSource::new(&d), &PolicyConfig::adaptive(-1.0), &mut rng).unwrap();
            assert_eq!(tally.total(), DEFAULT_T_MIN);
        }
    }

    #[test]
    fn zero_threshold_runs_to_t_max() {
        let d = make_uniform(100).unwrap();
        let config = PolicyConfig { t_max: 50, ..PolicyConfig::adaptive(0.0) };
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let tally = run_query_loop(&mut SyntheticSource::new(&d), &config, &mut rng).unwrap();
            assert_eq!(tally.total(), 50);
        }
    }

    #[test]
    fn replay_exhaustion_is_a_forced_stop() {
        let rec = QueryRecord { id: "q".into(), truth: 1, samples: vec![1, 2] };
        let point = OraclePoint::from(rec);
        let t = query_point(&point, &PolicyConfig::adaptive(0.0), 0).unwrap();
        assert_eq!(t.total(), 2);
        let t = query_point(&point, &PolicyConfig::fixed(10), 0).unwrap();
        assert_eq!(t.total(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let d = point_mass();
        let mut rng = rng_from_seed(0);
        let bad = [
            PolicyConfig::adaptive(0.5),
            PolicyConfig { t_min: 0, ..PolicyConfig::default() },
            PolicyConfig { t_min: 10, t_max: 5, ..PolicyConfig::default() },
        ];
        for cfg in bad {
            assert!(run_query_loop(&mut SyntheticSource::new(&d), &cfg, &mut rng).is_err());
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = default_beta_grid();
        assert_eq!(g.len(), 40);
        assert_eq!(g[0], -1.0);
        assert!((g[38] + 1e-6).abs() < 1e-18);
        assert_eq!(g[39], 0.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    fn synthetic_points(n: usize, m: usize) -> Vec<OraclePoint> {
        (0..n)
            .map(|i| OraclePoint::synthetic(format!("p{i}"), 0, make_uniform(m).unwrap()))
            .collect()
    }

    #[test]
    fn tune_beta_single_candidate() {
        let pts = synthetic_points(10, 20);
        let t = tune_beta(&pts, 5.0, &[-1.0], &PolicyConfig::default(), 1).unwrap();
        assert_eq!(t.beta_star, -1.0);
        assert_eq!(t.avg_queries, 3.0);
    }

    #[test]
    fn tune_beta_picks_largest_feasible_average() {
        let pts = synthetic_points(30, 20);
        let defaults = PolicyConfig { t_max: 40, ..PolicyConfig::default() };
        let grid = [-1.0, -0.02, 0.0];
        let t = tune_beta(&pts, 1e9, &grid, &defaults, 3).unwrap();
        // Every candidate fits; β = 0 never stops early so it uses the most queries.
        assert_eq!(t.beta_star, 0.0);
        assert_eq!(t.avg_queries, 40.0);

        let mid = t.candidates[1].1;
        assert!(mid > 3.0 && mid < 40.0, "mid candidate average {mid}");
        let t = tune_beta(&pts, (mid + 40.0) / 2.0, &grid, &defaults, 3).unwrap();
        assert_eq!(t.beta_star, -0.02);
        assert_eq!(t.avg_queries, mid);
    }

    #[test]
    fn tune_beta_uses_full_replay_length_when_budget_allows() {
        let recs: Vec<OraclePoint> = (0..5)
            .map(|i| QueryRecord { id: format!("r{i}"), truth: 0, samples: (0..30).collect() })
            .map(OraclePoint::from)
            .collect();
        let defaults = PolicyConfig { t_max: 30, ..PolicyConfig::default() };
        let t = tune_beta(&recs, 30.0, &default_beta_grid(), &defaults, 0).unwrap();
        assert_eq!(t.avg_queries, 30.0);
    }

    #[test]
    fn tune_beta_infeasible_returns_cheapest() {
        let pts = synthetic_points(10, 10);
        let t = tune_beta(&pts, 5.0, &[-1e-9, 0.0], &PolicyConfig::default(), 0).unwrap();
        assert!(t.candidates.iter().all(|c| c.1 > 5.0));
        let cheapest = t.candidates.iter().fold(t.candidates[0], |b, &c| if c.1 < b.1 { c } else { b });
        assert_eq!((t.beta_star, t.avg_queries), cheapest);
    }

    #[test]
    fn tune_beta_input_validation() {
        let pts = synthetic_points(5, 10);
        let d = PolicyConfig::default();
        assert!(matches!(tune_beta(&[], 5.0, &[-1.0], &d, 0), Err(CpqError::InvalidInput(_))));
        assert!(tune_beta(&pts, 5.0, &[], &d, 0).is_err());
        assert!(tune_beta(&pts, 5.0, &[0.0, -1.0], &d, 0).is_err());
        assert!(tune_beta(&pts, 1.0, &[-1.0], &d, 0).is_err());
    }

    #[test]
    fn greedy_examples() {
        let u = make_uniform(100).unwrap();
        assert_eq!(greedy_allocate(&[u.clone(), u.clone()], 4), vec![2, 2]);
        assert_eq!(greedy_allocate(&[point_mass(), u], 3), vec![1, 2]);
        assert_eq!(greedy_allocate(&[], 3), Vec::<u64>::new());
        assert_eq!(greedy_allocate_traced(&[point_mass()], 0).last_gain, None);
    }

    /// Exhaustive minimum of total exact missing mass over allocations summing to `budget`.
    fn brute_force_optimum(dists: &[DiscreteDistribution], budget: u64) -> f64 {
        fn rec(dists: &[DiscreteDistribution], left: u64) -> f64 {
            match dists {
                [] => 0.0,
                [only] => exact_missing_mass(only, left),
                [first, rest @ ..] => (0..=left)
                    .map(|k| exact_missing_mass(first, k) + rec(rest, left - k))
                    .fold(f64::INFINITY, f64::min),
            }
        }
        rec(dists, budget)
    }

    fn arb_dists() -> impl Strategy<Value = Vec<DiscreteDistribution>> {
        prop::collection::vec(
            prop::collection::vec(0.0f64..1.0, 1..8)
                .prop_filter_map("positive", |w| DiscreteDistribution::from_weights(&w).ok()),
            1..=3,
        )
    }

    proptest! {
        #[test]
        fn greedy_matches_exhaustive_optimum(dists in arb_dists(), budget in 0u64..=8) {
            let alloc = greedy_allocate(&dists, budget);
            prop_assert_eq!(alloc.iter().sum::<u64>(), budget);
            let greedy_total: f64 = dists.iter().zip(&alloc).map(|(d, &k)| exact_missing_mass(d, k)).sum();
            prop_assert!((greedy_total - brute_force_optimum(&dists, budget)).abs() <= 1e-12);
        }

        #[test]
        fn greedy_counts_satisfy_threshold_condition(dists in arb_dists(), budget in 1u64..=8) {
            let GreedyAllocation { counts, last_gain } = greedy_allocate_traced(&dists, budget);
            let beta = last_gain.unwrap();
            for (d, &k) in dists.iter().zip(&counts) {
                if k > 0 {
                    prop_assert!(exact_derivative(d, k - 1) <= beta);
                }
                prop_assert!(beta <= exact_derivative(d, k));
            }
        }

        #[test]
        fn lowering_budget_never_raises_counts(dists in arb_dists(), budget in 1u64..=12) {
            let big = greedy_allocate(&dists, budget);
            let small = greedy_allocate(&dists, budget - 1);
            prop_assert!(small.iter().zip(&big).all(|(s, b)| s <= b));
        }

        #[test]
        fn adaptive_loop_respects_bounds(
            m in 1usize..60,
            beta in -0.5f64..=0.0,
            t_min in 1u64..6,
            extra in 0u64..40,
            seed in any::<u64>(),
        ) {
            let d = make_uniform(m).unwrap();
            let config = PolicyConfig { beta_star: beta, t_min, t_max: t_min + extra, mode: QueryMode::Adaptive };
            let mut rng = rng_from_seed(seed);
            let tally = run_query_loop(&mut SyntheticSource::new(&d), &config, &mut rng).unwrap();
            prop_assert!(tally.total() >= t_min && tally.total() <= config.t_max);
        }
    }
}
