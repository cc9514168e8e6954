//! Inequality of rating activity: per-rater counts, Lorenz curve, Gini
//! coefficient, and a discrete power-law fit of the activity distribution.

mod powerlaw;

use std::collections::{BTreeMap, HashMap};

use chrono::{Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{RaterId, RatingEvent};

pub use powerlaw::{
    fit_power_law, hurwitz_zeta, lr_test_vs_exponential, sample_discrete_power_law, LrTestResult,
    PowerLawFit,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConcentrationError {
    #[error("empty input")]
    EmptyInput,
    #[error("all observations are equal")]
    DegenerateInput,
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("no x_min candidate leaves at least 10 tail observations")]
    NoValidCutoff,
}

/// Ratings per rater. Every count is at least one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityCounts {
    pub counts: BTreeMap<RaterId, u64>,
}

impl ActivityCounts {
    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn values(&self) -> Vec<u64> {
        self.counts.values().copied().collect()
    }

    pub fn get(&self, rater: &RaterId) -> u64 {
        self.counts.get(rater).copied().unwrap_or(0)
    }
}

pub fn activity_counts(ratings: &[RatingEvent]) -> ActivityCounts {
    let mut counts: BTreeMap<RaterId, u64> = BTreeMap::new();
    for r in ratings {
        *counts.entry(r.rater_id.clone()).or_default() += 1;
    }
    ActivityCounts { counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniResult {
    pub gini: f64,
    /// (cumulative share of raters, cumulative share of ratings), raters in
    /// ascending order of activity.
    pub lorenz: Vec<(f64, f64)>,
    /// Share of all ratings produced by the most active 20% of raters.
    pub top20_share: f64,
}

const LORENZ_FULL_LIMIT: usize = 100_000;
const LORENZ_QUANTILES: usize = 1_000;

/// Cumulative rating share of the least active fraction `p` of raters,
/// linearly interpolated between ranks. `sorted` must be ascending.
pub fn lorenz_share(sorted: &[u64], p: f64) -> f64 {
    let n = sorted.len();
    let total: u128 = sorted.iter().map(|&x| x as u128).sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let pos = p.clamp(0.0, 1.0) * n as f64;
    let k = (pos.floor() as usize).min(n);
    let frac = pos - k as f64;
    let cum: u128 = sorted[..k].iter().map(|&x| x as u128).sum();
    let partial = if k < n { frac * sorted[k] as f64 } else { 0.0 };
    (cum as f64 + partial) / total as f64
}

/// Gini coefficient of arbitrary non-negative values.
///
/// Uses the sorted form `G = Σ (2i − n − 1) x_(i) / (n Σ x)` with an exact
/// integer numerator, which equals the mean-absolute-difference definition.
pub fn gini_values(values: &[u64]) -> Result<GiniResult, ConcentrationError> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let total: u128 = sorted.iter().map(|&x| x as u128).sum();
    if n == 0 || total == 0 {
        return Err(ConcentrationError::EmptyInput);
    }
    let numerator: i128 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2 * (i as i128 + 1) - n as i128 - 1) * x as i128)
        .sum();
    let gini = numerator as f64 / (n as f64 * total as f64);

    let mut cum = Vec::with_capacity(n + 1);
    let mut acc: u128 = 0;
    cum.push(0u128);
    for &x in &sorted {
        acc += x as u128;
        cum.push(acc);
    }
    let point = |k: usize| (k as f64 / n as f64, cum[k] as f64 / total as f64);
    let lorenz: Vec<(f64, f64)> = if n <= LORENZ_FULL_LIMIT {
        (0..=n).map(point).collect()
    } else {
        (0..=LORENZ_QUANTILES)
            .map(|j| point(((j as u128 * n as u128) / LORENZ_QUANTILES as u128) as usize))
            .collect()
    };
    Ok(GiniResult {
        gini: gini.clamp(0.0, 1.0),
        lorenz,
        top20_share: 1.0 - lorenz_share(&sorted, 0.8),
    })
}

pub fn gini(counts: &ActivityCounts) -> Result<GiniResult, ConcentrationError> {
    gini_values(&counts.values())
}

/// UTC calendar year of a millisecond timestamp.
pub fn utc_year(millis: i64) -> i32 {
    Utc.timestamp_millis_opt(millis)
        .single()
        .map(|d| d.year())
        .unwrap_or(1970)
}

/// One Gini per UTC calendar year over the raters active in that year.
pub fn gini_by_year(ratings: &[RatingEvent]) -> BTreeMap<i32, f64> {
    let mut per_year: BTreeMap<i32, HashMap<&RaterId, u64>> = BTreeMap::new();
    for r in ratings {
        *per_year
            .entry(utc_year(r.created_at))
            .or_default()
            .entry(&r.rater_id)
            .or_default() += 1;
    }
    per_year
        .into_iter()
        .filter_map(|(year, counts)| {
            let values: Vec<u64> = counts.into_values().collect();
            gini_values(&values).ok().map(|g| (year, g.gini))
        })
        .collect()
}
