//! Rater selectivity: how many distinct tweet authors a rater engages with
//! as a function of their total ratings, against an author-shuffled null.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ingest::AnnotatedRating;
use crate::model::{AuthorId, RaterId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectivityError {
    #[error("need at least {needed} points with r >= 2, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate design: fewer than 3 distinct r values")]
    DegenerateDesign,
    #[error("no convergence after {iterations} iterations (relative gradient {rel_gradient:.3e})")]
    NonConvergence { iterations: usize, rel_gradient: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectivityPoint {
    pub rater_id: RaterId,
    pub r: u64,
    pub n_authors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationFit {
    pub n_asy: f64,
    pub tau: f64,
    pub ci95_n_asy: f64,
    pub ci95_tau: f64,
    pub residual_sse: f64,
    pub n_points: usize,
    pub iterations: usize,
}

impl SaturationFit {
    pub fn predict(&self, r: f64) -> f64 {
        saturation(self.n_asy, self.tau, r)
    }
}

pub fn saturation(n_asy: f64, tau: f64, r: f64) -> f64 {
    -n_asy * (-r / tau).exp_m1()
}

/// One point per rater, ordered by rater id.
pub fn selectivity_points(annotated: &[AnnotatedRating]) -> Vec<SelectivityPoint> {
    let mut per_rater: BTreeMap<&RaterId, (u64, HashSet<&AuthorId>)> = BTreeMap::new();
    for a in annotated {
        let e = per_rater.entry(&a.rating.rater_id).or_default();
        e.0 += 1;
        e.1.insert(&a.tweet_author_id);
    }
    per_rater
        .into_iter()
        .map(|(rater, (r, authors))| SelectivityPoint {
            rater_id: rater.clone(),
            r,
            n_authors: authors.len() as u64,
        })
        .collect()
}

/// Permutes the (author, party) labels uniformly across rating events.
pub fn shuffle_null(annotated: &[AnnotatedRating], seed: u64) -> Vec<AnnotatedRating> {
    let mut labels: Vec<(AuthorId, crate::model::Party)> = annotated
        .iter()
        .map(|a| (a.tweet_author_id.clone(), a.party))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    annotated
        .iter()
        .zip(labels)
        .map(|(a, (author, party))| AnnotatedRating {
            tweet_author_id: author,
            party,
            ..a.clone()
        })
        .collect()
}

const MIN_POINTS: usize = 5;
const MAX_ITER: usize = 500;
const SSE_RTOL: f64 = 1e-10;
const GRAD_RTOL: f64 = 1e-6;

struct Design {
    r: Vec<f64>,
    y: Vec<f64>,
}

impl Design {
    fn sse(&self, a: f64, tau: f64) -> f64 {
        self.r
            .iter()
            .zip(&self.y)
            .map(|(&r, &y)| (y - saturation(a, tau, r)).powi(2))
            .sum()
    }

    /// (JᵀJ, Jᵀres, SSE) with res = y − model and J the model Jacobian.
    fn normal_equations(&self, a: f64, tau: f64) -> ([[f64; 2]; 2], [f64; 2], f64) {
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        let mut sse = 0.0;
        for (&r, &y) in self.r.iter().zip(&self.y) {
            let e = (-r / tau).exp();
            let ja = 1.0 - e;
            let jt = -a * e * r / (tau * tau);
            let res = y - a * ja;
            jtj[0][0] += ja * ja;
            jtj[0][1] += ja * jt;
            jtj[1][1] += jt * jt;
            jtr[0] += ja * res;
            jtr[1] += jt * res;
            sse += res * res;
        }
        jtj[1][0] = jtj[0][1];
        (jtj, jtr, sse)
    }
}

fn solve2(m: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() <= f64::MIN_POSITIVE || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * m[1][1] - b[1] * m[0][1]) / det,
        (m[0][0] * b[1] - m[1][0] * b[0]) / det,
    ])
}

fn rel_gradient(jtr: [f64; 2], sse: f64) -> f64 {
    // gradient of SSE is −2 Jᵀres
    let g = 2.0 * (jtr[0].powi(2) + jtr[1].powi(2)).sqrt();
    if sse > 0.0 {
        g / sse
    } else {
        g
    }
}

/// Unweighted Levenberg–Marquardt fit of `N(r) = N_asy (1 − e^{−r/τ})`
/// over the per-rater scatter. Raters with `r < 2` are excluded.
pub fn fit_saturation(points: &[SelectivityPoint]) -> Result<SaturationFit, SelectivityError> {
    let used: Vec<&SelectivityPoint> = points.iter().filter(|p| p.r >= 2).collect();
    if used.len() < MIN_POINTS {
        return Err(SelectivityError::TooFewPoints {
            needed: MIN_POINTS,
            got: used.len(),
        });
    }
    let r: Vec<f64> = used.iter().map(|p| p.r as f64).collect();
    let y: Vec<f64> = used.iter().map(|p| p.n_authors as f64).collect();
    fit_saturation_xy(&r, &y)
}

/// Same fit over arbitrary real-valued `(r, y)` pairs.
pub fn fit_saturation_xy(r: &[f64], y: &[f64]) -> Result<SaturationFit, SelectivityError> {
    assert_eq!(r.len(), y.len());
    if r.len() < MIN_POINTS {
        return Err(SelectivityError::TooFewPoints {
            needed: MIN_POINTS,
            got: r.len(),
        });
    }
    let distinct_r: HashSet<u64> = r.iter().map(|v| v.to_bits()).collect();
    if distinct_r.len() < 3 {
        return Err(SelectivityError::DegenerateDesign);
    }
    let d = Design {
        r: r.to_vec(),
        y: y.to_vec(),
    };
    let mut sorted_r = d.r.clone();
    sorted_r.sort_by(f64::total_cmp);
    let mut a = d.y.iter().cloned().fold(f64::MIN, f64::max);
    let mut tau = {
        let m = sorted_r.len();
        if m % 2 == 1 {
            sorted_r[m / 2]
        } else {
            0.5 * (sorted_r[m / 2 - 1] + sorted_r[m / 2])
        }
    };

    let mut lambda = 1e-3;
    let (mut jtj, mut jtr, mut sse) = d.normal_equations(a, tau);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITER {
        iterations += 1;
        if sse == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        // inner damping loop; bounded so an iteration always terminates
        for _ in 0..60 {
            let damped = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let Some(step) = solve2(damped, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let (na, nt) = (a + step[0], tau + step[1]);
            if na <= 0.0 || nt <= 0.0 || !na.is_finite() || !nt.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let new_sse = d.sse(na, nt);
            if new_sse <= sse {
                let rel_change = (sse - new_sse) / sse;
                let tiny_step =
                    step[0].abs() <= 1e-15 * na.abs() && step[1].abs() <= 1e-15 * nt.abs();
                a = na;
                tau = nt;
                (jtj, jtr, sse) = d.normal_equations(a, tau);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_change < SSE_RTOL || tiny_step {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // no descent direction left within float precision
            converged = rel_gradient(jtr, sse) <= GRAD_RTOL;
            break;
        }
    }
    if !converged && rel_gradient(jtr, sse) > GRAD_RTOL {
        return Err(SelectivityError::NonConvergence {
            iterations,
            rel_gradient: rel_gradient(jtr, sse),
        });
    }

    let n = d.r.len();
    let dof = (n - 2) as f64;
    let s2 = sse / dof;
    let (ci_a, ci_t) = match invert2(jtj) {
        Some(inv) => {
            let t = StudentsT::new(0.0, 1.0, dof)
                .map(|dist| dist.inverse_cdf(0.975))
                .unwrap_or(1.959_963_984_540_054);
            (
                t * (s2 * inv[0][0]).max(0.0).sqrt(),
                t * (s2 * inv[1][1]).max(0.0).sqrt(),
            )
        }
        None => (f64::INFINITY, f64::INFINITY),
    };
    Ok(SaturationFit {
        n_asy: a,
        tau,
        ci95_n_asy: ci_a,
        ci95_tau: ci_t,
        residual_sse: sse,
        n_points: n,
        iterations,
    })
}

fn invert2(m: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() <= f64::MIN_POSITIVE || !det.is_finite() {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Null fits over `reps` independent shuffles; the i-th shuffle uses
/// `seed + i`, so rep 0 matches the single headline null.
pub fn null_fits(
    annotated: &[AnnotatedRating],
    seed: u64,
    reps: usize,
) -> Vec<Result<SaturationFit, SelectivityError>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|i| fit_saturation(&selectivity_points(&shuffle_null(annotated, seed.wrapping_add(i)))))
        .collect()
}
