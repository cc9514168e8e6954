//! Full-batch matrix-factorization training.
//!
//! Loss over N ratings, U raters and M notes:
//!
//! ```text
//! (1/N) Σ (r − μ − i_u − i_n − f_u·f_n)²
//!   + λ_i (μ² + (1/U) Σ i_u² + (1/M) Σ i_n²)
//!   + λ_f ((1/U) Σ |f_u|² + (1/M) Σ |f_n|²)
//! ```
//!
//! The default optimizer sweeps exact block minimizers (μ, then each rater's
//! intercept and factor, then each note's). The alternative takes
//! Jacobi-preconditioned gradient steps, moving every coordinate by
//! `lr · g / h` with `h` its Gauss-Newton diagonal curvature. All sums run
//! in a fixed order, so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{encode_rating, Optimizer, ScorerConfig, ScorerError};
use crate::model::{NoteId, RaterId, RatingEvent};

const SUM_CHUNK: usize = 1 << 14;
const INIT_SCALE: f64 = 0.05;

/// Ratings in (note, rater) order with a second index by (rater, note).
#[derive(Debug, Clone)]
pub struct RatingMatrix {
    pub notes: Vec<NoteId>,
    pub raters: Vec<RaterId>,
    pub note_of: Vec<u32>,
    pub rater_of: Vec<u32>,
    pub value: Vec<f64>,
    /// `note_ptr[n]..note_ptr[n+1]` are the ratings of note `n`.
    pub note_ptr: Vec<usize>,
    /// Rating indices grouped by rater, `rater_ptr` delimits the groups.
    pub by_rater: Vec<u32>,
    pub rater_ptr: Vec<usize>,
}

impl RatingMatrix {
    /// Builds the matrix; input order does not matter. Duplicate
    /// (note, rater) pairs must already be removed.
    pub fn build(ratings: &[RatingEvent]) -> RatingMatrix {
        let mut order: Vec<&RatingEvent> = ratings.iter().collect();
        order.par_sort_unstable_by(|a, b| {
            a.note_id
                .cmp(&b.note_id)
                .then_with(|| a.rater_id.cmp(&b.rater_id))
        });
        let mut raters: Vec<RaterId> = ratings.iter().map(|r| r.rater_id.clone()).collect();
        raters.par_sort_unstable();
        raters.dedup();

        let n = order.len();
        let mut notes: Vec<NoteId> = Vec::new();
        let mut note_ptr = vec![0usize];
        let mut note_of = Vec::with_capacity(n);
        let mut value = Vec::with_capacity(n);
        for (k, r) in order.iter().enumerate() {
            if notes.last() != Some(&r.note_id) {
                if !notes.is_empty() {
                    note_ptr.push(k);
                }
                notes.push(r.note_id.clone());
            }
            note_of.push((notes.len() - 1) as u32);
            value.push(encode_rating(r.level));
        }
        if !notes.is_empty() {
            note_ptr.push(n);
        }
        let rater_of: Vec<u32> = order
            .par_iter()
            .map(|r| raters.binary_search(&r.rater_id).expect("rater indexed") as u32)
            .collect();

        let mut rater_ptr = vec![0usize; raters.len() + 1];
        for &u in &rater_of {
            rater_ptr[u as usize + 1] += 1;
        }
        for u in 0..raters.len() {
            rater_ptr[u + 1] += rater_ptr[u];
        }
        let mut fill = rater_ptr.clone();
        let mut by_rater = vec![0u32; n];
        // ascending k keeps each rater's ratings in note order
        for (k, &u) in rater_of.iter().enumerate() {
            by_rater[fill[u as usize]] = k as u32;
            fill[u as usize] += 1;
        }
        RatingMatrix {
            notes,
            raters,
            note_of,
            rater_of,
            value,
            note_ptr,
            by_rater,
            rater_ptr,
        }
    }

    pub fn n_ratings(&self) -> usize {
        self.value.len()
    }

    pub fn note_count(&self, n: usize) -> usize {
        self.note_ptr[n + 1] - self.note_ptr[n]
    }
}

/// Model parameters in dense form, indexed like the [`RatingMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub dim: usize,
    pub mu: f64,
    pub rater_intercept: Vec<f64>,
    pub note_intercept: Vec<f64>,
    /// Row-major, `dim` values per rater.
    pub rater_factor: Vec<f64>,
    pub note_factor: Vec<f64>,
}

/// Stable per-entity stream id so an entity starts from the same factors
/// regardless of which other entities are present.
fn entity_stream(kind: u8, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update([kind]);
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn init_factors(seed: u64, kind: u8, id: &str, dim: usize) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(entity_stream(kind, id));
    (0..dim).map(move |_| rng.random_range(-INIT_SCALE..INIT_SCALE))
}

impl Params {
    pub fn init(m: &RatingMatrix, dim: usize, seed: u64) -> Params {
        let rater_factor = m
            .raters
            .par_iter()
            .flat_map_iter(|r| init_factors(seed, b'u', r.as_str(), dim))
            .collect();
        let note_factor = m
            .notes
            .par_iter()
            .flat_map_iter(|n| init_factors(seed, b'n', n.as_str(), dim))
            .collect();
        Params {
            dim,
            mu: 0.0,
            rater_intercept: vec![0.0; m.raters.len()],
            note_intercept: vec![0.0; m.notes.len()],
            rater_factor,
            note_factor,
        }
    }

    fn dot(&self, u: usize, n: usize) -> f64 {
        let d = self.dim;
        self.rater_factor[u * d..(u + 1) * d]
            .iter()
            .zip(&self.note_factor[n * d..(n + 1) * d])
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn predict(&self, u: usize, n: usize) -> f64 {
        self.mu + self.rater_intercept[u] + self.note_intercept[n] + self.dot(u, n)
    }
}

fn ordered_sum(values: &[f64]) -> f64 {
    values
        .par_chunks(SUM_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

/// Observed minus predicted, one per rating in matrix order.
pub fn residuals(m: &RatingMatrix, p: &Params) -> Vec<f64> {
    (0..m.n_ratings())
        .into_par_iter()
        .with_min_len(SUM_CHUNK)
        .map(|k| m.value[k] - p.predict(m.rater_of[k] as usize, m.note_of[k] as usize))
        .collect()
}

fn sum_sq(v: &[f64]) -> f64 {
    v.par_chunks(SUM_CHUNK)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>())
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

fn loss_from_residuals(m: &RatingMatrix, p: &Params, res: &[f64], cfg: &ScorerConfig) -> f64 {
    let n = m.n_ratings() as f64;
    let u = m.raters.len().max(1) as f64;
    let nn = m.notes.len().max(1) as f64;
    let sq = ordered_sum(&res.par_iter().map(|e| e * e).collect::<Vec<f64>>());
    sq / n
        + cfg.lambda_intercept
            * (p.mu * p.mu + sum_sq(&p.rater_intercept) / u + sum_sq(&p.note_intercept) / nn)
        + cfg.lambda_factor * (sum_sq(&p.rater_factor) / u + sum_sq(&p.note_factor) / nn)
}

/// The training objective at `p`.
pub fn objective(m: &RatingMatrix, p: &Params, cfg: &ScorerConfig) -> f64 {
    loss_from_residuals(m, p, &residuals(m, p), cfg)
}

/// Gradient and diagonal Gauss-Newton curvature, both laid out like
/// [`Params`].
pub struct Gradient {
    pub grad: Params,
    pub curv: Params,
}

/// Per-entity accumulation for one side of the bipartite graph. `items`
/// yields the rating indices of the entity in a fixed order.
fn side_terms<'a>(
    idx: impl Iterator<Item = usize> + 'a,
    res: &'a [f64],
    other_factor: impl Fn(usize) -> &'a [f64] + 'a,
    dim: usize,
) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let mut se = 0.0;
    let mut cnt = 0.0;
    let mut gf = vec![0.0; dim];
    let mut hf = vec![0.0; dim];
    for k in idx {
        let e = res[k];
        se += e;
        cnt += 1.0;
        let f = other_factor(k);
        for j in 0..dim {
            gf[j] += e * f[j];
            hf[j] += f[j] * f[j];
        }
    }
    (se, cnt, gf, hf)
}

pub fn gradient(m: &RatingMatrix, p: &Params, res: &[f64], cfg: &ScorerConfig) -> Gradient {
    let d = p.dim;
    let n = m.n_ratings() as f64;
    let u_count = m.raters.len() as f64;
    let m_count = m.notes.len() as f64;
    let (li, lf) = (cfg.lambda_intercept, cfg.lambda_factor);

    let note_terms: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = (0..m.notes.len())
        .into_par_iter()
        .map(|j| {
            side_terms(
                m.note_ptr[j]..m.note_ptr[j + 1],
                res,
                |k| {
                    let u = m.rater_of[k] as usize;
                    &p.rater_factor[u * d..(u + 1) * d]
                },
                d,
            )
        })
        .collect();
    let rater_terms: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = (0..m.raters.len())
        .into_par_iter()
        .map(|u| {
            side_terms(
                m.by_rater[m.rater_ptr[u]..m.rater_ptr[u + 1]]
                    .iter()
                    .map(|&k| k as usize),
                res,
                |k| {
                    let j = m.note_of[k] as usize;
                    &p.note_factor[j * d..(j + 1) * d]
                },
                d,
            )
        })
        .collect();

    let assemble = |terms: &[(f64, f64, Vec<f64>, Vec<f64>)],
                    intercept: &[f64],
                    factor: &[f64],
                    count: f64| {
        let mut gi = Vec::with_capacity(terms.len());
        let mut hi = Vec::with_capacity(terms.len());
        let mut gf = Vec::with_capacity(terms.len() * d);
        let mut hf = Vec::with_capacity(terms.len() * d);
        for (x, (se, cnt, g, h)) in terms.iter().enumerate() {
            gi.push(-2.0 * se / n + 2.0 * li * intercept[x] / count);
            hi.push(2.0 * cnt / n + 2.0 * li / count);
            for j in 0..d {
                gf.push(-2.0 * g[j] / n + 2.0 * lf * factor[x * d + j] / count);
                hf.push(2.0 * h[j] / n + 2.0 * lf / count);
            }
        }
        (gi, hi, gf, hf)
    };
    let (gni, hni, gnf, hnf) = assemble(&note_terms, &p.note_intercept, &p.note_factor, m_count);
    let (gui, hui, guf, huf) = assemble(&rater_terms, &p.rater_intercept, &p.rater_factor, u_count);
    let total_e = ordered_sum(res);
    Gradient {
        grad: Params {
            dim: d,
            mu: -2.0 * total_e / n + 2.0 * li * p.mu,
            rater_intercept: gui,
            note_intercept: gni,
            rater_factor: guf,
            note_factor: gnf,
        },
        curv: Params {
            dim: d,
            mu: 2.0 + 2.0 * li,
            rater_intercept: hui,
            note_intercept: hni,
            rater_factor: huf,
            note_factor: hnf,
        },
    }
}

fn step(p: &Params, g: &Gradient, lr: f64) -> Params {
    let upd = |x: &[f64], gx: &[f64], hx: &[f64]| -> Vec<f64> {
        x.par_iter()
            .zip(gx.par_iter().zip(hx.par_iter()))
            .map(|(v, (g, h))| v - lr * g / h)
            .collect()
    };
    Params {
        dim: p.dim,
        mu: p.mu - lr * g.grad.mu / g.curv.mu,
        rater_intercept: upd(&p.rater_intercept, &g.grad.rater_intercept, &g.curv.rater_intercept),
        note_intercept: upd(&p.note_intercept, &g.grad.note_intercept, &g.curv.note_intercept),
        rater_factor: upd(&p.rater_factor, &g.grad.rater_factor, &g.curv.rater_factor),
        note_factor: upd(&p.note_factor, &g.grad.note_factor, &g.curv.note_factor),
    }
}

/// Solves the small symmetric positive definite system `a x = b` in place
/// by Gaussian elimination with partial pivoting.
fn solve_small(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs()))
            .expect("non-empty");
        if a[piv * n + c].abs() < 1e-300 {
            return false;
        }
        if piv != c {
            for j in 0..n {
                a.swap(c * n + j, piv * n + j);
            }
            b.swap(c, piv);
        }
        for i in c + 1..n {
            let f = a[i * n + c] / a[c * n + c];
            for j in c..n {
                a[i * n + j] -= f * a[c * n + j];
            }
            b[i] -= f * b[c];
        }
    }
    for c in (0..n).rev() {
        let mut v = b[c];
        for j in c + 1..n {
            v -= a[c * n + j] * b[j];
        }
        b[c] = v / a[c * n + c];
    }
    true
}

/// Exact ridge solve for one entity's `[intercept, factor]` given the other
/// side. `items` yields `(target, other_factor)` pairs.
fn entity_solve<'a>(
    items: impl Iterator<Item = (f64, &'a [f64])>,
    dim: usize,
    ridge_i: f64,
    ridge_f: f64,
    out: &mut [f64],
) {
    let n = dim + 1;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    let mut x = vec![0.0; n];
    x[0] = 1.0;
    for (y, f) in items {
        x[1..].copy_from_slice(f);
        for i in 0..n {
            b[i] += x[i] * y;
            for j in 0..n {
                a[i * n + j] += x[i] * x[j];
            }
        }
    }
    a[0] += ridge_i;
    for j in 1..n {
        a[j * n + j] += ridge_f;
    }
    if solve_small(&mut a, &mut b, n) {
        out.copy_from_slice(&b);
    }
}

/// One sweep of exact block minimization: μ, then every rater's intercept
/// and factor, then every note's. Each block update cannot raise the loss.
fn als_sweep(m: &RatingMatrix, p: &mut Params, cfg: &ScorerConfig) {
    let d = p.dim;
    let n = m.n_ratings() as f64;
    let ridge_u_i = cfg.lambda_intercept * n / m.raters.len() as f64;
    let ridge_u_f = cfg.lambda_factor * n / m.raters.len() as f64;
    let ridge_n_i = cfg.lambda_intercept * n / m.notes.len() as f64;
    let ridge_n_f = cfg.lambda_factor * n / m.notes.len() as f64;

    // μ minimizes (1/N) Σ (y − μ)² + λ_i μ²
    let res = residuals(m, p);
    let y_mean = (ordered_sum(&res) + p.mu * n) / n;
    p.mu = y_mean / (1.0 + cfg.lambda_intercept);

    let raters: Vec<Vec<f64>> = (0..m.raters.len())
        .into_par_iter()
        .map(|u| {
            let items = m.by_rater[m.rater_ptr[u]..m.rater_ptr[u + 1]].iter().map(|&k| {
                let k = k as usize;
                let j = m.note_of[k] as usize;
                (
                    m.value[k] - p.mu - p.note_intercept[j],
                    &p.note_factor[j * d..(j + 1) * d],
                )
            });
            let mut out = vec![p.rater_intercept[u]];
            out.extend_from_slice(&p.rater_factor[u * d..(u + 1) * d]);
            entity_solve(items, d, ridge_u_i, ridge_u_f, &mut out);
            out
        })
        .collect();
    for (u, v) in raters.into_iter().enumerate() {
        p.rater_intercept[u] = v[0];
        p.rater_factor[u * d..(u + 1) * d].copy_from_slice(&v[1..]);
    }

    let notes: Vec<Vec<f64>> = (0..m.notes.len())
        .into_par_iter()
        .map(|j| {
            let items = (m.note_ptr[j]..m.note_ptr[j + 1]).map(|k| {
                let u = m.rater_of[k] as usize;
                (
                    m.value[k] - p.mu - p.rater_intercept[u],
                    &p.rater_factor[u * d..(u + 1) * d],
                )
            });
            let mut out = vec![p.note_intercept[j]];
            out.extend_from_slice(&p.note_factor[j * d..(j + 1) * d]);
            entity_solve(items, d, ridge_n_i, ridge_n_f, &mut out);
            out
        })
        .collect();
    for (j, v) in notes.into_iter().enumerate() {
        p.note_intercept[j] = v[0];
        p.note_factor[j * d..(j + 1) * d].copy_from_slice(&v[1..]);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    /// Loss before the first step and after every accepted epoch.
    pub loss_trace: Vec<f64>,
    pub epochs_run: usize,
    /// Epochs whose step raised the loss and was retried at half the rate.
    pub lr_backoffs: usize,
}

pub fn train_matrix(m: &RatingMatrix, cfg: &ScorerConfig) -> Result<TrainOutcome, ScorerError> {
    if m.n_ratings() == 0 {
        return Err(ScorerError::EmptyInput);
    }
    match cfg.optimizer {
        Optimizer::Als => train_als(m, cfg),
        Optimizer::Gd => train_gd(m, cfg),
    }
}

fn train_als(m: &RatingMatrix, cfg: &ScorerConfig) -> Result<TrainOutcome, ScorerError> {
    let mut p = Params::init(m, cfg.factor_dim, cfg.seed);
    let mut loss = objective(m, &p, cfg);
    let mut trace = vec![loss];
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        als_sweep(m, &mut p, cfg);
        let next = objective(m, &p, cfg);
        if !next.is_finite() {
            return Err(ScorerError::NonFinite { epoch });
        }
        epochs_run = epoch;
        let rel = (loss - next).abs() / loss.max(f64::MIN_POSITIVE);
        loss = next;
        trace.push(loss);
        if rel < cfg.convergence_tol {
            break;
        }
    }
    Ok(TrainOutcome {
        params: p,
        loss_trace: trace,
        epochs_run,
        lr_backoffs: 0,
    })
}

fn train_gd(m: &RatingMatrix, cfg: &ScorerConfig) -> Result<TrainOutcome, ScorerError> {
    let mut p = Params::init(m, cfg.factor_dim, cfg.seed);
    let mut res = residuals(m, &p);
    let mut loss = loss_from_residuals(m, &p, &res, cfg);
    if !loss.is_finite() {
        return Err(ScorerError::NonFinite { epoch: 0 });
    }
    let mut trace = vec![loss];
    let mut lr = cfg.learning_rate;
    let mut backoffs = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let g = gradient(m, &p, &res, cfg);
        let mut attempt = 0;
        let (next, next_res, next_loss) = loop {
            let cand = step(&p, &g, lr);
            let cand_res = residuals(m, &cand);
            let cand_loss = loss_from_residuals(m, &cand, &cand_res, cfg);
            if !cand_loss.is_finite() {
                return Err(ScorerError::NonFinite { epoch });
            }
            if cand_loss <= loss || attempt >= 30 {
                break (cand, cand_res, cand_loss);
            }
            attempt += 1;
            backoffs += 1;
            lr *= 0.5;
            log::debug!("epoch {epoch}: loss rose, halving learning rate to {lr:e}");
        };
        epochs_run = epoch;
        let rel = (loss - next_loss).abs() / loss.max(f64::MIN_POSITIVE);
        p = next;
        res = next_res;
        loss = next_loss;
        trace.push(loss);
        lr *= cfg.lr_decay;
        if rel < cfg.convergence_tol {
            break;
        }
    }
    Ok(TrainOutcome {
        params: p,
        loss_trace: trace,
        epochs_run,
        lr_backoffs: backoffs,
    })
}
