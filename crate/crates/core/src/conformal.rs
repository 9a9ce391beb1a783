//! EE-augmented split-conformal calibration.
//!
//! Seen labels score `1 − p̂(y)`, the "everything else" label (and any label
//! that was never sampled) scores `2 − p̂(EE)`, so EE always ranks after
//! every seen label with positive mass. The calibrated threshold `q*` is the
//! `⌈(n+1)(1−α)⌉`-th smallest calibration score with `+∞` appended.
//!
//! The threshold-sweep baseline ([`vanilla_calibrate`]) is kept alongside for
//! comparison.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CpqError, Result};
use crate::estimators::{EstimatorConfig, LabelProbabilities};
use crate::policy::PolicyConfig;
use crate::Label;

/// A candidate label: a seen cluster or the abstract EE label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Candidate {
    Seen(Label),
    Ee,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub label: Candidate,
    pub score: f64,
}

/// Conformity score of `y`; labels absent from `probs` score as EE.
pub fn conformity_score(probs: &LabelProbabilities, y: Candidate) -> f64 {
    match y {
        Candidate::Seen(label) => match probs.get(label) {
            Some(p) => 1.0 - p,
            None => 2.0 - probs.ee_mass(),
        },
        Candidate::Ee => 2.0 - probs.ee_mass(),
    }
}

/// Every seen label plus EE, with scores, in ascending label order (EE last).
pub fn scored_candidates(probs: &LabelProbabilities) -> Vec<ScoredCandidate> {
    probs
        .seen()
        .keys()
        .map(|&y| Candidate::Seen(y))
        .chain(std::iter::once(Candidate::Ee))
        .map(|label| ScoredCandidate { label, score: conformity_score(probs, label) })
        .collect()
}

fn quantile_rank(n: usize, alpha: f64) -> usize {
    // Small slack so that e.g. 10 · 0.9 is not rounded up to 10.
    let k = ((n + 1) as f64 * (1.0 - alpha) - 1e-9).ceil();
    (k.max(1.0) as usize).min(n + 1)
}

/// Split-conformal quantile of `scores` with a `+∞` sentinel appended.
pub fn calibrate_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(CpqError::InvalidInput("no calibration scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CpqError::InvalidParameter(format!("alpha {alpha} not in (0,1)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CpqError::InvalidInput("NaN calibration score".into()));
    }
    let n = scores.len();
    let k = quantile_rank(n, alpha);
    if k == n + 1 {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// A prediction set: seen labels plus an EE flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub labels: BTreeSet<Label>,
    pub includes_ee: bool,
    /// `q*` for conformal sets, `τ` for threshold-sweep sets.
    pub threshold: f64,
}

impl PredictionSet {
    /// Covered iff the truth is an included seen label or EE is included.
    pub fn covers(&self, truth: Label) -> bool {
        self.includes_ee || self.labels.contains(&truth)
    }

    /// Number of seen labels; EE is not counted.
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        self.labels.is_subset(&other.labels) && (!self.includes_ee || other.includes_ee)
    }
}

/// `{y ∈ Z(x) ∪ {EE} : score(y) ≤ q*}`.
pub fn build_prediction_set(probs: &LabelProbabilities, q_star: f64) -> PredictionSet {
    let labels = probs
        .seen()
        .iter()
        .filter(|(_, &p)| 1.0 - p <= q_star)
        .map(|(&y, _)| y)
        .collect();
    PredictionSet {
        labels,
        includes_ee: 2.0 - probs.ee_mass() <= q_star,
        threshold: q_star,
    }
}

/// Threshold-sweep set: EE iff `p̂(EE) ≥ τ`, then seen labels by descending
/// probability (ties by ascending id) until their cumulative mass exceeds
/// `1 − τ`.
pub fn vanilla_build_set(probs: &LabelProbabilities, tau: f64) -> PredictionSet {
    let mut ranked: Vec<(Label, f64)> = probs.seen().iter().map(|(&y, &p)| (y, p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let target = 1.0 - tau;
    let mut labels = BTreeSet::new();
    let mut cumulative = 0.0;
    for (y, p) in ranked {
        if cumulative > target {
            break;
        }
        labels.insert(y);
        cumulative += p;
    }
    PredictionSet { labels, includes_ee: probs.ee_mass() >= tau, threshold: tau }
}

/// Uniform grid of `points` thresholds over `[0, 1]`.
pub fn uniform_tau_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

/// Empirical coverage of the threshold-sweep rule at `tau`.
pub fn vanilla_coverage(points: &[(LabelProbabilities, Label)], tau: f64) -> f64 {
    let covered = points
        .iter()
        .filter(|(probs, truth)| vanilla_build_set(probs, tau).covers(*truth))
        .count();
    covered as f64 / points.len() as f64
}

/// Calibrates the threshold-sweep baseline: the largest grid `τ` whose
/// empirical coverage on `points` is at least `1 − α`. Coverage does not
/// increase with `τ`, so this is the least conservative feasible threshold.
pub fn vanilla_calibrate(points: &[(LabelProbabilities, Label)], alpha: f64, grid: &[f64]) -> Result<f64> {
    if points.is_empty() {
        return Err(CpqError::InvalidInput("no calibration points".into()));
    }
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CpqError::InvalidParameter("tau grid must be non-empty within [0,1]".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CpqError::InvalidParameter(format!("alpha {alpha} not in (0,1)")));
    }
    let target = 1.0 - alpha;
    let coverages: Vec<(f64, f64)> = grid.iter().map(|&tau| (tau, vanilla_coverage(points, tau))).collect();
    coverages
        .iter()
        .filter(|(_, cov)| *cov >= target - 1e-12)
        .map(|(tau, _)| *tau)
        .fold(None, |best: Option<f64>, tau| Some(best.map_or(tau, |b| b.max(tau))))
        .ok_or_else(|| {
            let (best_tau, best_coverage) = coverages
                .iter()
                .copied()
                .fold((f64::NAN, -1.0), |b, c| if c.1 > b.1 { c } else { b });
            CpqError::InfeasibleCalibration { target, best_tau, best_coverage }
        })
}

pub const MODEL_FORMAT: &str = "cpq-calibration";
pub const MODEL_VERSION: u32 = 1;

/// Fitted calibration artifacts, persisted as JSON. An infinite `q_star` is
/// written as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub format: String,
    pub version: u32,
    pub alpha: f64,
    pub beta_star: f64,
    #[serde(with = "extended_f64")]
    pub q_star: f64,
    pub estimator: EstimatorConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
}

impl CalibrationModel {
    pub fn new(alpha: f64, q_star: f64, estimator: EstimatorConfig, policy: PolicyConfig, seed: u64) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            alpha,
            beta_star: policy.beta_star,
            q_star,
            estimator,
            policy,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self =
            serde_json::from_str(text).map_err(|e| CpqError::ModelMismatch(format!("unreadable model: {e}")))?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(CpqError::ModelMismatch(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                model.format, model.version
            )));
        }
        if model.beta_star != model.policy.beta_star {
            return Err(CpqError::ModelMismatch("beta_star disagrees with policy config".into()));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Policy used at prediction time.
    pub fn query_policy(&self) -> PolicyConfig {
        self.policy
    }
}

mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}
