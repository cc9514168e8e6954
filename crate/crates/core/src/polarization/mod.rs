//! Partisan leaning of raters from their ratings of politically annotated
//! notes, and bimodality of the leaning distribution by activity decile.

mod gmm;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concentration::ActivityCounts;
use crate::ingest::AnnotatedRating;
use crate::model::{NoteClassification, Party, RaterId, RatingLevel};

pub use gmm::{ashman_d, em_from, em_restarts, fit_gmm2, Component, EmRun, Gmm2, SIGMA_FLOOR};

pub const DEFAULT_MIN_RATINGS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolarizationError {
    #[error("no signals to compute a leaning from")]
    EmptyCounts,
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("sample has zero variance")]
    DegenerateSample,
    #[error("need at least 10 raters for deciles, got {got}")]
    TooFewRaters { got: usize },
    #[error("EM oscillated at the iteration cap on every restart")]
    NonConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Pro,
    Anti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartisanSignal {
    pub direction: Direction,
    pub party: Party,
}

/// H/SH on a misleading note is a signal against the tweet's party; NH on
/// it defends the party. Ratings of not-misleading notes read the other way.
pub fn signal_of(level: RatingLevel, classification: NoteClassification, party: Party) -> PartisanSignal {
    let direction = match (level.is_agreement(), classification) {
        (true, NoteClassification::Misleading) => Direction::Anti,
        (false, NoteClassification::Misleading) => Direction::Pro,
        (true, NoteClassification::NotMisleading) => Direction::Pro,
        (false, NoteClassification::NotMisleading) => Direction::Anti,
    };
    PartisanSignal { direction, party }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalCounts {
    pub a_dem: u64,
    pub p_dem: u64,
    pub a_rep: u64,
    pub p_rep: u64,
}

impl SignalCounts {
    pub fn total(&self) -> u64 {
        self.a_dem + self.p_dem + self.a_rep + self.p_rep
    }

    pub fn add(&mut self, s: PartisanSignal) {
        match (s.direction, s.party) {
            (Direction::Anti, Party::Democrat) => self.a_dem += 1,
            (Direction::Pro, Party::Democrat) => self.p_dem += 1,
            (Direction::Anti, Party::Republican) => self.a_rep += 1,
            (Direction::Pro, Party::Republican) => self.p_rep += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaningValue {
    /// Positive is Republican-leaning.
    pub l: f64,
    pub n_ratings: u64,
}

pub fn leaning(c: &SignalCounts) -> Result<LeaningValue, PolarizationError> {
    let total = c.total();
    if total == 0 {
        return Err(PolarizationError::EmptyCounts);
    }
    let num = (c.a_dem as i128 - c.p_dem as i128) + (c.p_rep as i128 - c.a_rep as i128);
    Ok(LeaningValue {
        l: num as f64 / total as f64,
        n_ratings: total,
    })
}

/// Leaning of every rater with at least `min_ratings` annotated ratings.
pub fn leaning_per_rater(
    annotated: &[AnnotatedRating],
    min_ratings: u64,
) -> BTreeMap<RaterId, LeaningValue> {
    let mut counts: HashMap<&RaterId, SignalCounts> = HashMap::new();
    for a in annotated {
        counts
            .entry(&a.rating.rater_id)
            .or_default()
            .add(signal_of(a.rating.level, a.note_classification, a.party));
    }
    counts
        .into_iter()
        .filter(|(_, c)| c.total() >= min_ratings.max(1))
        .map(|(r, c)| (r.clone(), leaning(&c).expect("nonzero total")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkewKind {
    #[default]
    Biased,
    Adjusted,
}

impl std::str::FromStr for SkewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "biased" => Ok(SkewKind::Biased),
            "adjusted" => Ok(SkewKind::Adjusted),
            other => Err(format!("unknown skewness kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaningStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    /// The skewness selected by `skew_kind`.
    pub skewness: f64,
    pub skew_kind: SkewKind,
    /// g1 = m3 / m2^{3/2}
    pub skewness_biased: f64,
    /// G1 = g1 √(n(n−1)) / (n−2)
    pub skewness_adjusted: f64,
}

pub fn leaning_stats(values: &[f64], skew_kind: SkewKind) -> Result<LeaningStats, PolarizationError> {
    let n = values.len();
    if n < 3 {
        return Err(PolarizationError::TooFewValues { needed: 3, got: n });
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return Err(PolarizationError::DegenerateSample);
    }
    let g1 = m3 / m2.powf(1.5);
    let adjusted = g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(LeaningStats {
        n,
        mean,
        median,
        std: (m2 * nf / (nf - 1.0)).sqrt(),
        skewness: match skew_kind {
            SkewKind::Biased => g1,
            SkewKind::Adjusted => adjusted,
        },
        skew_kind,
        skewness_biased: g1,
        skewness_adjusted: adjusted,
    })
}

/// Splits the eligible raters into ten activity deciles; decile 10 holds
/// the most active. Remainder raters go one each to deciles 10, 9, ...
pub fn decile_partition(
    activity: &ActivityCounts,
    eligible: &BTreeSet<RaterId>,
) -> Result<BTreeMap<RaterId, u8>, PolarizationError> {
    let n = eligible.len();
    if n < 10 {
        return Err(PolarizationError::TooFewRaters { got: n });
    }
    let mut order: Vec<(u64, &RaterId)> = eligible.iter().map(|r| (activity.get(r), r)).collect();
    order.sort();
    let sizes = decile_sizes(n);
    let mut out = BTreeMap::new();
    let mut it = order.into_iter();
    for (d, &size) in sizes.iter().enumerate() {
        for (_, r) in it.by_ref().take(size) {
            out.insert(r.clone(), d as u8 + 1);
        }
    }
    Ok(out)
}

pub fn decile_sizes(n: usize) -> [usize; 10] {
    let base = n / 10;
    let rem = n % 10;
    let mut sizes = [base; 10];
    for s in sizes.iter_mut().rev().take(rem) {
        *s += 1;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileFit {
    pub decile: u8,
    pub n_raters: usize,
    pub gmm: Option<Gmm2>,
    pub ashman_d: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationReport {
    pub min_ratings: u64,
    pub seed: u64,
    pub n_raters: usize,
    pub stats: Option<LeaningStats>,
    pub overall_gmm: Option<Gmm2>,
    pub overall_ashman_d: Option<f64>,
    pub deciles: Vec<DecileFit>,
    #[serde(skip)]
    pub leanings: BTreeMap<RaterId, LeaningValue>,
    #[serde(skip)]
    pub decile_of: BTreeMap<RaterId, u8>,
}

/// Leaning, descriptive statistics, and per-decile mixture fits. Decile `d`
/// uses seed `seed + d`.
pub fn analyze(
    annotated: &[AnnotatedRating],
    activity: &ActivityCounts,
    min_ratings: u64,
    seed: u64,
    skew_kind: SkewKind,
) -> PolarizationReport {
    use rayon::prelude::*;

    let leanings = leaning_per_rater(annotated, min_ratings);
    let values: Vec<f64> = leanings.values().map(|v| v.l).collect();
    let stats = leaning_stats(&values, skew_kind).ok();
    let overall_gmm = fit_gmm2(&values, seed).ok();
    let eligible: BTreeSet<RaterId> = leanings.keys().cloned().collect();
    let decile_of = decile_partition(activity, &eligible).unwrap_or_default();
    let deciles: Vec<DecileFit> = if decile_of.is_empty() {
        Vec::new()
    } else {
        (1..=10u8)
            .into_par_iter()
            .map(|d| {
                let xs: Vec<f64> = decile_of
                    .iter()
                    .filter(|(_, &dd)| dd == d)
                    .map(|(r, _)| leanings[r].l)
                    .collect();
                match fit_gmm2(&xs, seed.wrapping_add(d as u64)) {
                    Ok(g) => DecileFit {
                        decile: d,
                        n_raters: xs.len(),
                        ashman_d: Some(ashman_d(&g)),
                        gmm: Some(g),
                        error: None,
                    },
                    Err(e) => DecileFit {
                        decile: d,
                        n_raters: xs.len(),
                        gmm: None,
                        ashman_d: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    };
    PolarizationReport {
        min_ratings,
        seed,
        n_raters: values.len(),
        stats,
        overall_ashman_d: overall_gmm.as_ref().map(ashman_d),
        overall_gmm,
        deciles,
        leanings,
        decile_of,
    }
}
