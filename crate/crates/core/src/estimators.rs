//! Good–Turing style estimators computed from a [`Tally`].
//!
//! * missing mass: `N₁ / t`
//! * missing-mass derivative (doubleton estimator): `−2 N₂ / t²`
//! * seen-label probability: `(r + 1)/t · N_{r+1} / N_r`
//!
//! All estimators are undefined on an empty tally; callers treat the missing
//! mass of an unqueried input as 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CpqError, Result};
use crate::tally::Tally;
use crate::Label;

/// What to do when the Good–Turing ratio `N_{r+1}/N_r` is undefined or zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtFallback {
    /// Use the empirical frequency `r / t`.
    #[default]
    EmpiricalFrequency,
    /// Give the label zero raw weight.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Raw seen-label estimates are relative weights rescaled to sum to `1 − ee_mass`.
    #[default]
    ScaleSeenToComplement,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub gt_fallback: GtFallback,
    pub clip_to_unit: bool,
    pub normalization: Normalization,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gt_fallback: GtFallback::EmpiricalFrequency,
            clip_to_unit: true,
            normalization: Normalization::ScaleSeenToComplement,
        }
    }
}

/// Estimated probabilities of the seen labels plus the mass of the
/// "everything else" (EE) label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProbabilities {
    seen: BTreeMap<Label, f64>,
    ee_mass: f64,
}

impl LabelProbabilities {
    pub fn new(seen: BTreeMap<Label, f64>, ee_mass: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ee_mass) {
            return Err(CpqError::InvalidParameter(format!("ee_mass {ee_mass} outside [0,1]")));
        }
        if seen.values().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CpqError::InvalidParameter("seen probabilities must be >= 0".into()));
        }
        Ok(Self { seen, ee_mass })
    }

    /// Probabilities for an input that was never queried: all mass on EE.
    pub fn all_unseen() -> Self {
        Self { seen: BTreeMap::new(), ee_mass: 1.0 }
    }

    pub fn seen(&self) -> &BTreeMap<Label, f64> {
        &self.seen
    }

    pub fn ee_mass(&self) -> f64 {
        self.ee_mass
    }

    /// Estimated probability of a seen label, `None` when unseen.
    pub fn get(&self, y: Label) -> Option<f64> {
        self.seen.get(&y).copied()
    }

    pub fn total(&self) -> f64 {
        self.seen.values().sum::<f64>() + self.ee_mass
    }
}

fn require_samples(tally: &Tally) -> Result<f64> {
    match tally.total() {
        0 => Err(CpqError::UndefinedEstimate),
        t => Ok(t as f64),
    }
}

/// Good–Turing missing mass `N₁ / t`, clipped to `[0, 1]`.
pub fn gt_missing_mass(tally: &Tally) -> Result<f64> {
    let t = require_samples(tally)?;
    Ok((tally.singletons() as f64 / t).clamp(0.0, 1.0))
}

/// Doubleton estimator of the missing-mass forward difference, `−2 N₂ / t²`.
pub fn gt_derivative(tally: &Tally) -> Result<f64> {
    let t = require_samples(tally)?;
    Ok(-2.0 * tally.doubletons() as f64 / (t * t))
}

/// Plug-in baseline: finite difference of successive missing-mass estimates.
/// Unlike [`gt_derivative`] this can come out positive.
pub fn naive_derivative(prev_mm: f64, next_mm: f64) -> f64 {
    next_mm - prev_mm
}

/// Good–Turing probability of a seen label with the empirical-frequency fallback.
pub fn gt_seen_probability(tally: &Tally, y: Label) -> Result<f64> {
    gt_seen_probability_with(tally, y, GtFallback::EmpiricalFrequency)
}

pub fn gt_seen_probability_with(tally: &Tally, y: Label, fallback: GtFallback) -> Result<f64> {
    let t = require_samples(tally)?;
    let r = tally.count(y);
    if r == 0 {
        return Err(CpqError::UnknownLabel(y));
    }
    let n_r = tally.n_r(r);
    let n_next = tally.n_r(r + 1);
    if n_r > 0 && n_next > 0 {
        return Ok((r + 1) as f64 / t * n_next as f64 / n_r as f64);
    }
    Ok(match fallback {
        GtFallback::EmpiricalFrequency => r as f64 / t,
        GtFallback::Skip => 0.0,
    })
}

/// Estimated distribution over seen labels and EE for one tally.
pub fn label_probabilities(tally: &Tally, config: &EstimatorConfig) -> Result<LabelProbabilities> {
    let t = require_samples(tally)?;
    let mut ee_mass = tally.singletons() as f64 / t;
    if config.clip_to_unit {
        ee_mass = ee_mass.clamp(0.0, 1.0);
    }

    let mut raw = BTreeMap::new();
    for (y, _) in tally.counts() {
        raw.insert(y, gt_seen_probability_with(tally, y, config.gt_fallback)?);
    }
    if raw.values().all(|&p| p == 0.0) {
        for (y, r) in tally.counts() {
            raw.insert(y, r as f64 / t);
        }
    }

    let seen = match config.normalization {
        Normalization::None => raw,
        Normalization::ScaleSeenToComplement => {
            let total: f64 = raw.values().sum();
            let scale = (1.0 - ee_mass).max(0.0) / total;
            raw.into_iter().map(|(y, p)| (y, p * scale)).collect()
        }
    };
    Ok(LabelProbabilities { seen, ee_mass })
}
