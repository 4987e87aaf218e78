use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::{Error, Result};

const CHUNK: usize = 8192;
const DRAW_RANGE: f64 = 10.0;

/// `exp(u_i/τ) / Σ_j exp(u_j/τ)` with the maximum subtracted first.
pub fn softmax_tau(u: &[f64], tau: f64) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipReport {
    pub tau: f64,
    pub dim: usize,
    pub trials: usize,
    /// Pairs with `u = v`, excluded from the ratio.
    pub skipped: usize,
    pub max_ratio: f64,
    /// The lemma's constant `1/(2τ)`.
    pub bound: f64,
    pub violations: usize,
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs `trials` seeded pair draws in fixed-size chunks, one RNG stream per
/// chunk, so the report does not depend on the thread count.
fn sample_pairs<F>(tau: f64, dim: usize, trials: usize, seed: u64, pair: F) -> Result<LipReport>
where
    F: Fn(&mut ChaCha8Rng) -> Option<f64> + Sync,
{
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("tau = {tau} must be positive")));
    }
    if trials == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "need at least one trial and dimension".into(),
        ));
    }
    let bound = 1.0 / (2.0 * tau);
    let chunks = trials.div_ceil(CHUNK);
    let parts: Vec<(f64, usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = CHUNK.min(trials - c * CHUNK);
            let (mut max, mut skipped, mut violations) = (0.0f64, 0usize, 0usize);
            for _ in 0..n {
                match pair(&mut rng) {
                    None => skipped += 1,
                    Some(r) => {
                        max = max.max(r);
                        if r > bound {
                            violations += 1;
                        }
                    }
                }
            }
            (max, skipped, violations)
        })
        .collect();
    Ok(LipReport {
        tau,
        dim,
        trials,
        skipped: parts.iter().map(|p| p.1).sum(),
        max_ratio: parts.iter().map(|p| p.0).fold(0.0, f64::max),
        bound,
        violations: parts.iter().map(|p| p.2).sum(),
    })
}

fn draw(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.random_range(-DRAW_RANGE..=DRAW_RANGE))
        .collect()
}

/// Largest `‖σ_τ(u) - σ_τ(v)‖_∞ / ‖u - v‖_∞` over seeded pairs with entries
/// in `[-10, 10]`.
pub fn softmax_lip_check(tau: f64, dim: usize, trials: usize, seed: u64) -> Result<LipReport> {
    sample_pairs(tau, dim, trials, seed, |rng| {
        let u = draw(rng, dim);
        let v = draw(rng, dim);
        ratio(&u, &v, tau)
    })
}

fn ratio(u: &[f64], v: &[f64], tau: f64) -> Option<f64> {
    let den = inf_norm_diff(u, v);
    if den == 0.0 {
        return None;
    }
    Some(inf_norm_diff(&softmax_tau(u, tau), &softmax_tau(v, tau)) / den)
}

/// Row-wise version on `rows × rows` score matrices: entrywise max norms of
/// the row-softmaxed difference against the score difference.
pub fn row_softmax_lip_check(tau: f64, rows: usize, trials: usize, seed: u64) -> Result<LipReport> {
    sample_pairs(tau, rows, trials, seed, |rng| {
        let s = draw(rng, rows * rows);
        let t = draw(rng, rows * rows);
        let den = inf_norm_diff(&s, &t);
        if den == 0.0 {
            return None;
        }
        let num = s
            .chunks(rows)
            .zip(t.chunks(rows))
            .map(|(a, b)| inf_norm_diff(&softmax_tau(a, tau), &softmax_tau(b, tau)))
            .fold(0.0, f64::max);
        Some(num / den)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_tau(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
        let p = softmax_tau(&[1.0, 0.0], 1.0);
        assert!((p[0] - 0.7311).abs() < 5e-5 && (p[1] - 0.2689).abs() < 5e-5);
        let a = softmax_tau(&[0.3, -2.0, 1.7], 0.7);
        let b = softmax_tau(&[100.3, 98.0, 101.7], 0.7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = softmax_tau(&[1000.0, -1000.0, 999.0], 1.0);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_bound_is_active_and_respected() {
        let r = softmax_lip_check(1.0, 2, 100_000, 0).unwrap();
        assert!(r.max_ratio <= 0.5 && r.max_ratio >= 0.2, "{r:?}");
        assert_eq!(r.violations, 0);
        let r = softmax_lip_check(5.0, 4, 20_000, 1).unwrap();
        assert!(r.max_ratio <= 0.1);
    }

    #[test]
    fn equal_pairs_are_skipped() {
        assert_eq!(ratio(&[1.0, 2.0], &[1.0, 2.0], 1.0), None);
        // dimension-1 softmax is constant, so every ratio is zero
        let r = softmax_lip_check(1.0, 1, 100, 0).unwrap();
        assert_eq!(r.max_ratio, 0.0);
    }

    #[test]
    fn report_is_thread_count_independent() {
        let a = softmax_lip_check(0.5, 3, 20_000, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| softmax_lip_check(0.5, 3, 20_000, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn row_wise_corollary() {
        for tau in [0.5, 1.0, 2.0] {
            let r = row_softmax_lip_check(tau, 4, 20_000, 2).unwrap();
            assert_eq!(r.violations, 0, "{r:?}");
        }
    }
}
