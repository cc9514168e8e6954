//! Discrete power-law fitting with a KS-selected lower cutoff and a Vuong
//! likelihood-ratio comparison against a shifted geometric law.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::ConcentrationError;

const ALPHA_MIN: f64 = 1.0 + 1e-6;
const ALPHA_MAX: f64 = 6.0;
const MIN_OBSERVATIONS: usize = 50;
const MIN_TAIL: usize = 10;

/// B_{2j} / (2j)! for j = 1..=8.
const EM_COEFFS: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 720.0,
    1.0 / 30_240.0,
    -1.0 / 1_209_600.0,
    1.0 / 47_900_160.0,
    -691.0 / 1_307_674_368_000.0,
    1.0 / 74_724_249_600.0,
    -3617.0 / 10_670_622_842_880_000.0,
];

/// Hurwitz zeta `ζ(s, q) = Σ_{k≥0} (k + q)^{-s}` for `s > 1`, `q > 0`.
///
/// Terms below `q + k = 16` are summed directly; the remainder uses the
/// Euler–Maclaurin expansion with eight Bernoulli corrections.
pub fn hurwitz_zeta(s: f64, q: f64) -> f64 {
    debug_assert!(s > 1.0 && q > 0.0);
    let mut sum = 0.0;
    let mut a = q;
    while a < 16.0 {
        sum += a.powf(-s);
        a += 1.0;
    }
    let a_neg_s = (-s * a.ln()).exp();
    let inv_a2 = 1.0 / (a * a);
    let mut tail = a * a_neg_s / (s - 1.0) + 0.5 * a_neg_s;
    // (s)_{2j-1} a^{-s-2j+1}
    let mut rising = s;
    let mut pow = a_neg_s / a;
    for (j, c) in EM_COEFFS.iter().enumerate() {
        tail += c * rising * pow;
        let k = 2.0 * j as f64;
        rising *= (s + k + 1.0) * (s + k + 2.0);
        pow *= inv_a2;
    }
    sum + tail
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub alpha_stderr: f64,
    pub x_min: u64,
    pub ks_distance: f64,
    pub n_tail: usize,
}

impl PowerLawFit {
    pub fn pmf(&self, x: u64) -> f64 {
        if x < self.x_min {
            return 0.0;
        }
        (x as f64).powf(-self.alpha) / hurwitz_zeta(self.alpha, self.x_min as f64)
    }

    /// P(X ≤ x) for the fitted tail law.
    pub fn cdf(&self, x: u64) -> f64 {
        if x < self.x_min {
            return 0.0;
        }
        1.0 - hurwitz_zeta(self.alpha, x as f64 + 1.0) / hurwitz_zeta(self.alpha, self.x_min as f64)
    }

    /// Mean of the fitted tail law; infinite for alpha ≤ 2.
    pub fn mean(&self) -> Option<f64> {
        (self.alpha > 2.0).then(|| {
            hurwitz_zeta(self.alpha - 1.0, self.x_min as f64)
                / hurwitz_zeta(self.alpha, self.x_min as f64)
        })
    }
}

/// Maximizes a unimodal function on `[lo, hi]` by golden-section search.
fn golden_max(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Discrete maximum-likelihood exponent for a tail with `n` observations
/// whose logs sum to `sum_ln`.
fn mle_alpha(n: usize, sum_ln: f64, x_min: u64) -> f64 {
    let q = x_min as f64;
    let ll = |a: f64| -(n as f64) * hurwitz_zeta(a, q).ln() - a * sum_ln;
    golden_max(ALPHA_MIN, ALPHA_MAX, 1e-9, ll)
}

/// Sup distance between the empirical and fitted CDFs over all integers
/// `≥ x_min`. `distinct` holds (value, count) pairs in ascending order.
fn ks_distance(distinct: &[(u64, usize)], n: usize, alpha: f64, x_min: u64) -> f64 {
    let z0 = hurwitz_zeta(alpha, x_min as f64);
    let mut d: f64 = 0.0;
    let mut cum = 0usize;
    for &(v, c) in distinct {
        // just below v the empirical CDF still equals the previous level
        let before = cum as f64 / n as f64;
        let model_before = 1.0 - hurwitz_zeta(alpha, v as f64) / z0;
        d = d.max((before - model_before).abs());
        cum += c;
        let at = cum as f64 / n as f64;
        let model_at = 1.0 - hurwitz_zeta(alpha, v as f64 + 1.0) / z0;
        d = d.max((at - model_at).abs());
    }
    d
}

/// Fits `P(X = x) ∝ x^{-α}` for `x ≥ x_min`, choosing `x_min` among the
/// distinct observed values (up to the 99.9th percentile) by minimal KS
/// distance.
pub fn fit_power_law(values: &[u64]) -> Result<PowerLawFit, ConcentrationError> {
    let mut sorted: Vec<u64> = values.iter().copied().filter(|&v| v > 0).collect();
    sorted.sort_unstable();
    if sorted.len() < MIN_OBSERVATIONS {
        return Err(ConcentrationError::TooFewObservations {
            needed: MIN_OBSERVATIONS,
            got: sorted.len(),
        });
    }
    if sorted.first() == sorted.last() {
        return Err(ConcentrationError::DegenerateInput);
    }
    let n = sorted.len();
    let p999 = sorted[((n as f64 * 0.999).ceil() as usize).min(n) - 1];

    // distinct values with counts, plus suffix sums of counts and logs
    let mut distinct: Vec<(u64, usize)> = Vec::new();
    for &v in &sorted {
        match distinct.last_mut() {
            Some((last, c)) if *last == v => *c += 1,
            _ => distinct.push((v, 1)),
        }
    }
    let m = distinct.len();
    let mut tail_n = vec![0usize; m + 1];
    let mut tail_ln = vec![0.0f64; m + 1];
    for i in (0..m).rev() {
        let (v, c) = distinct[i];
        tail_n[i] = tail_n[i + 1] + c;
        tail_ln[i] = tail_ln[i + 1] + c as f64 * (v as f64).ln();
    }

    let candidates: Vec<usize> = (0..m)
        .filter(|&i| distinct[i].0 <= p999 && tail_n[i] >= MIN_TAIL)
        .collect();
    if candidates.is_empty() {
        return Err(ConcentrationError::NoValidCutoff);
    }
    let best = candidates
        .par_iter()
        .map(|&i| {
            let x_min = distinct[i].0;
            let alpha = mle_alpha(tail_n[i], tail_ln[i], x_min);
            let d = ks_distance(&distinct[i..], tail_n[i], alpha, x_min);
            (d, i, alpha)
        })
        // smallest D, ties to the smaller cutoff
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("non-empty candidates");
    let (ks, i, alpha) = best;
    let n_tail = tail_n[i];
    Ok(PowerLawFit {
        alpha,
        alpha_stderr: (alpha - 1.0) / (n_tail as f64).sqrt(),
        x_min: distinct[i].0,
        ks_distance: ks.clamp(0.0, 1.0),
        n_tail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    /// Normalized log-likelihood ratio; positive favors the power law.
    pub r: f64,
    pub p_value: f64,
    /// Unnormalized log-likelihood ratio.
    pub log_ratio: f64,
    /// Rate of the geometric alternative `P(x) ∝ e^{-λ (x - x_min)}`.
    pub exp_lambda: f64,
}

/// Vuong test of the fitted power law against a discrete exponential
/// (geometric shifted to `x_min`) fitted to the same tail by maximum
/// likelihood. Two-sided p from the normal approximation.
pub fn lr_test_vs_exponential(
    values: &[u64],
    fit: &PowerLawFit,
) -> Result<LrTestResult, ConcentrationError> {
    let tail: Vec<f64> = values
        .iter()
        .filter(|&&v| v >= fit.x_min)
        .map(|&v| v as f64)
        .collect();
    let n = tail.len();
    if n < MIN_TAIL {
        return Err(ConcentrationError::NoValidCutoff);
    }
    let x_min = fit.x_min as f64;
    let mean_excess = tail.iter().map(|x| x - x_min).sum::<f64>() / n as f64;
    if mean_excess <= 0.0 {
        return Err(ConcentrationError::DegenerateInput);
    }
    let lambda = (1.0 + 1.0 / mean_excess).ln();
    let log_norm_exp = (-(-lambda).exp_m1()).ln();
    let log_norm_pl = hurwitz_zeta(fit.alpha, x_min).ln();
    let diffs: Vec<f64> = tail
        .iter()
        .map(|&x| {
            let lp_pl = -fit.alpha * x.ln() - log_norm_pl;
            let lp_exp = log_norm_exp - lambda * (x - x_min);
            lp_pl - lp_exp
        })
        .collect();
    let total: f64 = diffs.iter().sum();
    let mean = total / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    let (r, p) = if sd > 0.0 {
        let r = total / ((n as f64).sqrt() * sd);
        (r, erfc(r.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
    } else {
        (0.0, 1.0)
    };
    Ok(LrTestResult {
        r,
        p_value: p,
        log_ratio: total,
        exp_lambda: lambda,
    })
}

/// Exact inverse-CDF draw from the discrete power law on `x ≥ x_min`.
pub fn sample_discrete_power_law<R: Rng + ?Sized>(rng: &mut R, alpha: f64, x_min: u64) -> u64 {
    const CAP: u64 = 1 << 50;
    let z0 = hurwitz_zeta(alpha, x_min as f64);
    let u: f64 = rng.random();
    // smallest x with P(X > x) = ζ(α, x+1)/ζ0 ≤ 1 - u
    let target = (1.0 - u) * z0;
    let survives = |x: u64| hurwitz_zeta(alpha, x as f64 + 1.0) > target;
    if !survives(x_min) {
        return x_min;
    }
    let mut lo = x_min; // survives(lo) holds
    let mut hi = x_min.max(1) * 2;
    while survives(hi) {
        lo = hi;
        if hi >= CAP {
            return CAP;
        }
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if survives(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation with an integral tail bound, independent of the
    /// Euler–Maclaurin path.
    fn zeta_by_summation(s: f64, q: f64) -> f64 {
        let terms = 2_000_000u64;
        let mut sum = 0.0;
        for k in (0..terms).rev() {
            sum += (q + k as f64).powf(-s);
        }
        let a = q + terms as f64;
        sum + a.powf(1.0 - s) / (s - 1.0) + 0.5 * a.powf(-s)
    }

    #[test]
    fn zeta_known_values() {
        let pi = std::f64::consts::PI;
        assert!((hurwitz_zeta(2.0, 1.0) - pi * pi / 6.0).abs() < 1e-13);
        assert!((hurwitz_zeta(4.0, 1.0) - pi.powi(4) / 90.0).abs() < 1e-13);
        // ζ(2, 1/2) = π²/2
        assert!((hurwitz_zeta(2.0, 0.5) - pi * pi / 2.0).abs() < 1e-12);
        for &(s, q) in &[(1.5, 1.0), (2.5, 5.0), (3.06, 4232.0), (1.1, 20.0), (5.9, 2.0)] {
            let a = hurwitz_zeta(s, q);
            let b = zeta_by_summation(s, q);
            assert!(((a - b) / b).abs() < 1e-9, "s={s} q={q}: {a} vs {b}");
        }
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert_eq!(fit_power_law(&[7; 100]), Err(ConcentrationError::DegenerateInput));
        assert!(matches!(
            fit_power_law(&[1, 2, 3]),
            Err(ConcentrationError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn pmf_normalizes() {
        let fit = PowerLawFit {
            alpha: 2.5,
            alpha_stderr: 0.0,
            x_min: 5,
            ks_distance: 0.0,
            n_tail: 0,
        };
        let limit = 10_000_000u64;
        let mut sum = 0.0;
        for x in (fit.x_min..=limit).rev() {
            sum += fit.pmf(x);
        }
        // tail mass beyond the limit is bounded by the integral from `limit`
        let tail_bound = (limit as f64).powf(1.0 - fit.alpha)
            / ((fit.alpha - 1.0) * hurwitz_zeta(fit.alpha, fit.x_min as f64));
        assert!(tail_bound < 1e-6);
        assert!((sum - 1.0).abs() < 1e-6 + tail_bound);
        assert!((fit.cdf(limit) - sum).abs() < 1e-9);
    }

    #[test]
    fn sampler_matches_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let draws: Vec<u64> = (0..n).map(|_| sample_discrete_power_law(&mut rng, 2.5, 5)).collect();
        assert!(draws.iter().all(|&x| x >= 5));
        let z = hurwitz_zeta(2.5, 5.0);
        for x in 5..10u64 {
            let expected = (x as f64).powf(-2.5) / z;
            let freq = draws.iter().filter(|&&d| d == x).count() as f64 / n as f64;
            let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!((freq - expected).abs() < 5.0 * sigma, "x={x}: {freq} vs {expected}");
        }
    }

    fn draws(seed: u64, n: usize, alpha: f64, x_min: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sample_discrete_power_law(&mut rng, alpha, x_min)).collect()
    }

    #[test]
    fn recovers_generator_exponent() {
        let x = draws(42, 100_000, 2.5, 5);
        let fit = fit_power_law(&x).unwrap();
        assert!((2.45..=2.55).contains(&fit.alpha), "{fit:?}");
        assert!((3..=10).contains(&fit.x_min), "{fit:?}");
        assert!((0.0..=1.0).contains(&fit.ks_distance));
        assert!((fit.alpha_stderr - (fit.alpha - 1.0) / (fit.n_tail as f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fitted_tail_mean_decreases_with_alpha() {
        let means: Vec<f64> = [2.3, 2.6, 2.9, 3.2]
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let fit = fit_power_law(&draws(100 + i as u64, 20_000, a, 5)).unwrap();
                fit.mean().unwrap()
            })
            .collect();
        for w in means.windows(2) {
            assert!(w[1] < w[0], "{means:?}");
        }
    }

    #[test]
    fn lr_test_prefers_true_law() {
        let x = draws(7, 100_000, 2.5, 5);
        let fit = fit_power_law(&x).unwrap();
        let lr = lr_test_vs_exponential(&x, &fit).unwrap();
        assert!(lr.r > 0.0 && lr.p_value < 0.01, "{lr:?}");

        // geometric tail starting at 5 with mean excess 20
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q: f64 = 20.0 / 21.0;
        let geo: Vec<u64> = (0..20_000)
            .map(|_| {
                let u: f64 = rng.random();
                5 + ((1.0 - u).ln() / q.ln()).floor() as u64
            })
            .collect();
        let fit = fit_power_law(&geo).unwrap();
        let lr = lr_test_vs_exponential(&geo, &fit).unwrap();
        assert!(lr.r < 0.0, "{fit:?} {lr:?}");
        assert!((0.0..=1.0).contains(&lr.p_value));
    }

    /// Brute-force oracle: the KS distance over every integer in the tail
    /// support, evaluated with direct PMF accumulation.
    #[test]
    fn ks_distance_matches_brute_force() {
        let x = draws(9, 500, 2.2, 3);
        let fit = fit_power_law(&x).unwrap();
        let tail: Vec<u64> = x.iter().copied().filter(|&v| v >= fit.x_min).collect();
        let n = tail.len() as f64;
        let max = *tail.iter().max().unwrap();
        let z = zeta_by_summation(fit.alpha, fit.x_min as f64);
        let mut model = 0.0;
        let mut d: f64 = 0.0;
        for v in fit.x_min..=max {
            model += (v as f64).powf(-fit.alpha) / z;
            let emp = tail.iter().filter(|&&t| t <= v).count() as f64 / n;
            d = d.max((emp - model).abs());
        }
        assert!((d - fit.ks_distance).abs() < 1e-8, "{d} vs {}", fit.ks_distance);
    }
}
