//! Two-component 1-D Gaussian mixture fitted by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PolarizationError;

pub const SIGMA_FLOOR: f64 = 1e-3;
const RESTARTS: u64 = 10;
const MAX_ITER: usize = 1000;
const LL_TOL: f64 = 1e-8;
const MIN_VALUES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mu: f64,
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2 {
    /// Ordered by mean.
    pub components: [Component; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl Gmm2 {
    pub fn swapped(&self) -> Gmm2 {
        Gmm2 {
            components: [self.components[1], self.components[0]],
            ..self.clone()
        }
    }
}

/// Ashman's D; D > 2 indicates a clean separation of the two modes.
pub fn ashman_d(g: &Gmm2) -> f64 {
    let [a, b] = g.components;
    (a.mu - b.mu).abs() / ((a.sigma.powi(2) + b.sigma.powi(2)) / 2.0).sqrt()
}

/// Result of a single EM run, with the per-iteration log-likelihood.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub gmm: Gmm2,
    pub ll_trace: Vec<f64>,
    pub hit_cap: bool,
    /// Hit the cap while the last few increments changed sign.
    pub oscillating: bool,
}

const OSC_WINDOW: usize = 10;

fn oscillates(trace: &[f64]) -> bool {
    let tail = &trace[trace.len().saturating_sub(OSC_WINDOW + 1)..];
    let steps: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    steps.iter().any(|d| *d < 0.0) && steps.iter().any(|d| *d > 0.0)
}

fn ln_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// k-means++ style seeding: one data point uniformly, the second with
/// probability proportional to squared distance from the first.
fn init_means(x: &[f64], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let first = x[rng.random_range(0..x.len())];
    let d2: Vec<f64> = x.iter().map(|v| (v - first).powi(2)).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return (first, first);
    }
    let mut u = rng.random::<f64>() * total;
    for (v, w) in x.iter().zip(&d2) {
        if u < *w {
            return (first, *v);
        }
        u -= w;
    }
    (first, *x.last().unwrap())
}

/// One EM run from the given initial means.
pub fn em_from(x: &[f64], mu0: (f64, f64)) -> EmRun {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(SIGMA_FLOOR);
    let mut comp = [
        Component { mu: mu0.0, sigma: sd, weight: 0.5 },
        Component { mu: mu0.1, sigma: sd, weight: 0.5 },
    ];
    let mut resp = vec![0.0f64; x.len()];
    let mut trace: Vec<f64> = Vec::new();
    let mut hit_cap = true;
    for _ in 0..MAX_ITER {
        // E-step
        let mut ll = 0.0;
        for (i, &v) in x.iter().enumerate() {
            let l0 = comp[0].weight.ln() + ln_normal(v, comp[0].mu, comp[0].sigma);
            let l1 = comp[1].weight.ln() + ln_normal(v, comp[1].mu, comp[1].sigma);
            let lse = log_sum_exp(l0, l1);
            ll += lse;
            resp[i] = (l0 - lse).exp();
        }
        if let Some(&prev) = trace.last() {
            assert!(
                ll >= prev - 1e-9 * prev.abs().max(1.0),
                "EM log-likelihood decreased: {prev} -> {ll}"
            );
        }
        trace.push(ll);
        if trace.len() >= 2 && (ll - trace[trace.len() - 2]).abs() < LL_TOL {
            hit_cap = false;
            break;
        }
        // M-step; the floor keeps each sigma update a constrained maximizer
        let r0: f64 = resp.iter().sum();
        let r1 = n - r0;
        for (k, rk) in [(0usize, r0), (1, r1)] {
            if rk <= 0.0 {
                // empty component keeps its parameters but loses its weight
                comp[k].weight = f64::MIN_POSITIVE;
                continue;
            }
            let w = |i: usize| if k == 0 { resp[i] } else { 1.0 - resp[i] };
            let mu = x.iter().enumerate().map(|(i, v)| w(i) * v).sum::<f64>() / rk;
            let var = x
                .iter()
                .enumerate()
                .map(|(i, v)| w(i) * (v - mu).powi(2))
                .sum::<f64>()
                / rk;
            comp[k] = Component {
                mu,
                sigma: var.sqrt().max(SIGMA_FLOOR),
                weight: rk / n,
            };
        }
    }
    if comp[1].mu < comp[0].mu {
        comp.swap(0, 1);
    }
    let total_w = comp[0].weight + comp[1].weight;
    comp[0].weight /= total_w;
    comp[1].weight = 1.0 - comp[0].weight;
    EmRun {
        gmm: Gmm2 {
            components: comp,
            log_likelihood: *trace.last().unwrap(),
            iterations: trace.len(),
        },
        oscillating: hit_cap && oscillates(&trace),
        ll_trace: trace,
        hit_cap,
    }
}

/// All restarts, in restart order.
pub fn em_restarts(values: &[f64], seed: u64) -> Vec<EmRun> {
    (0..RESTARTS)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            em_from(values, init_means(values, &mut rng))
        })
        .collect()
}

pub fn fit_gmm2(values: &[f64], seed: u64) -> Result<Gmm2, PolarizationError> {
    if values.len() < MIN_VALUES {
        return Err(PolarizationError::TooFewValues {
            needed: MIN_VALUES,
            got: values.len(),
        });
    }
    // a run still climbing at the cap is usable; one that oscillates is not
    em_restarts(values, seed)
        .into_iter()
        .filter(|r| !r.oscillating)
        .reduce(|best, r| if r.gmm.log_likelihood > best.gmm.log_likelihood { r } else { best })
        .map(|r| r.gmm)
        .ok_or(PolarizationError::NonConvergence)
}
