//! Finite categorical distributions with closed-form missing mass.
//!
//! These serve as ground-truth oracles: for a known distribution `θ` the
//! probability that the next draw is a label not yet seen after `t` draws is
//! `Σ_j θ_j (1 − θ_j)^t`, and its forward difference in `t` is
//! `−Σ_j θ_j² (1 − θ_j)^t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpqError, Result};
use crate::Label;

/// Tolerance on `Σ p = 1` accepted by [`DiscreteDistribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// A categorical distribution over label ids `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteDistribution {
    probabilities: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscreteDistribution {
    /// Validates an already-normalized probability vector.
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(CpqError::InvalidParameter("empty support".into()));
        }
        if let Some(p) = probabilities.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(CpqError::InvalidParameter(format!("bad probability {p}")));
        }
        let total = compensated_sum(probabilities.iter().copied());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(CpqError::InvalidParameter(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self::with_cumulative(probabilities))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CpqError::InvalidParameter("weights must be finite and >= 0".into()));
        }
        let total = compensated_sum(weights.iter().copied());
        if weights.is_empty() || total <= 0.0 {
            return Err(CpqError::InvalidParameter("weights must have positive total".into()));
        }
        Ok(Self::with_cumulative(weights.iter().map(|w| w / total).collect()))
    }

    fn with_cumulative(probabilities: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { probabilities, cumulative }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn support_size(&self) -> usize {
        self.probabilities.len()
    }

    /// Probability of `label`, zero outside the support.
    pub fn probability(&self, label: Label) -> f64 {
        usize::try_from(label)
            .ok()
            .and_then(|i| self.probabilities.get(i).copied())
            .unwrap_or(0.0)
    }

    /// Draws one label by inversion of the cumulative distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Label {
        let u: f64 = rng.gen();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        if idx < self.probabilities.len() {
            return idx as Label;
        }
        // u landed above the rounded total; take the last atom with mass.
        self.probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(0) as Label
    }
}

impl TryFrom<Vec<f64>> for DiscreteDistribution {
    type Error = CpqError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<DiscreteDistribution> for Vec<f64> {
    fn from(d: DiscreteDistribution) -> Self {
        d.probabilities
    }
}

/// Uniform distribution over `m` labels.
pub fn make_uniform(m: usize) -> Result<DiscreteDistribution> {
    if m == 0 {
        return Err(CpqError::InvalidParameter("uniform support must be >= 1".into()));
    }
    Ok(DiscreteDistribution::with_cumulative(vec![1.0 / m as f64; m]))
}

/// Geometric distribution `p (1 − p)^i`, truncated to `i < m` and renormalized.
pub fn make_geometric(p: f64, m: usize) -> Result<DiscreteDistribution> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CpqError::InvalidParameter(format!("geometric p={p} not in (0,1)")));
    }
    if m == 0 {
        return Err(CpqError::InvalidParameter("geometric support must be >= 1".into()));
    }
    let q = 1.0 - p;
    let weights: Vec<f64> = (0..m).map(|i| p * q.powi(i as i32)).collect();
    DiscreteDistribution::from_weights(&weights)
}

/// Exact missing mass `Σ_j θ_j (1 − θ_j)^t` after `t` draws.
pub fn exact_missing_mass(d: &DiscreteDistribution, t: u64) -> f64 {
    compensated_sum(d.probabilities.iter().map(|&p| p * pow_u64(1.0 - p, t)))
}

/// Exact forward difference `θ(t+1) − θ(t) = −Σ_j θ_j² (1 − θ_j)^t`.
pub fn exact_derivative(d: &DiscreteDistribution, t: u64) -> f64 {
    -compensated_sum(d.probabilities.iter().map(|&p| p * p * pow_u64(1.0 - p, t)))
}

fn pow_u64(base: f64, exp: u64) -> f64 {
    match i32::try_from(exp) {
        Ok(e) => base.powi(e),
        Err(_) => base.powf(exp as f64),
    }
}

/// Neumaier-compensated summation.
pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
