//! Per-input label counts with an incrementally maintained
//! frequency-of-frequencies histogram (`N_r` = number of distinct labels
//! seen exactly `r` times).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::Label;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    counts: BTreeMap<Label, u64>,
    total: u64,
    freq_of_freq: BTreeMap<u64, u64>,
}

impl Tally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I: IntoIterator<Item = Label>>(labels: I) -> Self {
        let mut tally = Self::new();
        labels.into_iter().for_each(|y| tally.push(y));
        tally
    }

    /// Records one observation of `y`.
    pub fn push(&mut self, y: Label) {
        let count = self.counts.entry(y).or_insert(0);
        let prior = *count;
        *count += 1;
        self.total += 1;
        if prior > 0 {
            if let Some(n) = self.freq_of_freq.get_mut(&prior) {
                *n -= 1;
                if *n == 0 {
                    self.freq_of_freq.remove(&prior);
                }
            }
        }
        *self.freq_of_freq.entry(prior + 1).or_insert(0) += 1;
    }

    /// Total number of observations `t`.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, y: Label) -> u64 {
        self.counts.get(&y).copied().unwrap_or(0)
    }

    pub fn contains(&self, y: Label) -> bool {
        self.counts.contains_key(&y)
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// `N_r` for `r ≥ 1`; zero when no label has count `r`.
    pub fn n_r(&self, r: u64) -> u64 {
        self.freq_of_freq.get(&r).copied().unwrap_or(0)
    }

    pub fn singletons(&self) -> u64 {
        self.n_r(1)
    }

    pub fn doubletons(&self) -> u64 {
        self.n_r(2)
    }

    /// Labels with their counts, ascending by label id.
    pub fn counts(&self) -> impl Iterator<Item = (Label, u64)> + '_ {
        self.counts.iter().map(|(&y, &c)| (y, c))
    }

    /// Non-zero `(r, N_r)` pairs, ascending by `r`.
    pub fn freq_of_freq(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.freq_of_freq.iter().map(|(&r, &n)| (r, n))
    }
}
