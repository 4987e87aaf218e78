//! Generalization-bound evaluation: the master bound, the covering-number
//! bound, regime thresholds, theoretical exponents and sample complexity.
//!
//! Hidden constants are explicit inputs defaulting to one, polylog factors
//! are dropped, and every log is natural. Absolute values are therefore
//! trend indicators; exponents and crossovers are the meaningful outputs.

use serde::{Deserialize, Serialize};

use crate::accounting::{routing_term, ArchConfig, ParamCounts};
use crate::error::{Error, Result};

/// Smoothness `β` and intrinsic dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingParams {
    pub beta: f64,
    pub d: f64,
}

impl ScalingParams {
    pub fn new(beta: f64, d: f64) -> Result<Self> {
        let p = Self { beta, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!(
                "beta = {} must be positive",
                self.beta
            )));
        }
        if !(self.d >= 1.0 && self.d.is_finite()) {
            return Err(Error::Domain(format!("d = {} must be at least 1", self.d)));
        }
        Ok(())
    }

    /// `2β/d`, the approximation exponent in `N_act`.
    pub fn model_exponent(&self) -> f64 {
        2.0 * self.beta / self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub c_approx: f64,
    pub c_est: f64,
    pub c_rt: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self {
            c_approx: 1.0,
            c_est: 1.0,
            c_rt: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DominantTerm {
    Approximation,
    Estimation,
    Routing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundBreakdown {
    pub approx_term: f64,
    pub est_term: f64,
    pub routing_term: f64,
    pub total: f64,
    pub dominant: DominantTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentTriple {
    pub alpha_n: f64,
    pub alpha_d: f64,
    pub alpha_c: f64,
}

impl ExponentTriple {
    /// `α_N / (1 + α_N)`, which equals `α_D` identically.
    pub fn predicted_data_exponent(&self) -> f64 {
        self.alpha_n / (1.0 + self.alpha_n)
    }

    /// `α_N / (2 + α_N)`, which equals `α_C` identically.
    pub fn predicted_compute_exponent(&self) -> f64 {
        self.alpha_n / (2.0 + self.alpha_n)
    }
}

pub fn master_bound(
    active: f64,
    n: f64,
    r_route: f64,
    p: &ScalingParams,
    c: &BoundConstants,
) -> BoundBreakdown {
    let approx_term = c.c_approx * active.powf(-p.model_exponent());
    let est_term = c.c_est * active / n;
    let routing_term = c.c_rt * r_route / n;
    let mut dominant = DominantTerm::Approximation;
    let mut best = approx_term;
    if est_term > best {
        dominant = DominantTerm::Estimation;
        best = est_term;
    }
    if routing_term > best {
        dominant = DominantTerm::Routing;
    }
    BoundBreakdown {
        approx_term,
        est_term,
        routing_term,
        total: approx_term + est_term + routing_term,
        dominant,
    }
}

/// Covering constants `C1, C2, C3`, one by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for CoverConstants {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
        }
    }
}

/// Log covering number of the MoE class at sup-norm radius `delta`:
/// `C1 (Π_attn + L_T k Π_exp) ln(C2 κ R M0 / δ) + C3 L_T ℓ k ln(eM/k)`.
pub fn covering_bound(
    cfg: &ArchConfig,
    counts: &ParamCounts,
    delta: f64,
    c: &CoverConstants,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta = {delta} must lie in (0, 1)")));
    }
    let params =
        counts.attn_per_block as f64 + (cfg.blocks * cfg.k) as f64 * counts.expert_params as f64;
    let scale = c.c2 * cfg.weight_bound * cfg.output_bound * cfg.input_bound / delta;
    Ok(c.c1 * params * scale.ln() + c.c3 * routing_term(cfg))
}

/// `approx² + log_cover / n + δ` with the `R²` scale absorbed.
pub fn erm_excess_bound(approx_sq: f64, log_cover: f64, n: f64, delta: f64) -> f64 {
    approx_sq + log_cover / n + delta
}

pub fn theoretical_exponents(p: &ScalingParams) -> ExponentTriple {
    let (b, d) = (p.beta, p.d);
    ExponentTriple {
        alpha_n: 2.0 * b / d,
        alpha_d: 2.0 * b / (2.0 * b + d),
        alpha_c: b / (b + d),
    }
}

/// `n^{d/(2β+d)}`: the `N_act` at which approximation and estimation balance.
pub fn estimation_crossover(n: f64, p: &ScalingParams) -> f64 {
    n.powf(p.d / (2.0 * p.beta + p.d))
}

/// `(n / R_route)^{d/(2β)}`.
pub fn routing_crossover_from_term(n: f64, r_route: f64, p: &ScalingParams) -> Result<f64> {
    if r_route <= 0.0 {
        return Err(Error::Domain("routing term must be positive".into()));
    }
    Ok((n / r_route).powf(p.d / (2.0 * p.beta)))
}

pub fn routing_crossover(n: f64, cfg: &ArchConfig, p: &ScalingParams) -> Result<f64> {
    routing_crossover_from_term(n, routing_term(cfg), p)
}

/// Upper end of the subcritical (approximation-dominated) `N_act` range.
pub fn subcritical_limit(n: f64, cfg: &ArchConfig, p: &ScalingParams) -> Result<f64> {
    Ok(estimation_crossover(n, p).min(routing_crossover(n, cfg, p)?))
}

/// `R_route^{(2β+d)/d}`.
pub fn n_threshold_from_term(r_route: f64, p: &ScalingParams) -> f64 {
    r_route.powf((2.0 * p.beta + p.d) / p.d)
}

pub fn n_threshold(cfg: &ArchConfig, p: &ScalingParams) -> f64 {
    n_threshold_from_term(routing_term(cfg), p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    RoutingDominated,
    PowerLaw,
    Transition,
}

pub fn regime_from_threshold(n: f64, n_thr: f64, margin: f64) -> Regime {
    if n < n_thr / margin {
        Regime::RoutingDominated
    } else if n > n_thr * margin {
        Regime::PowerLaw
    } else {
        Regime::Transition
    }
}

pub fn regime_classify(n: f64, cfg: &ArchConfig, p: &ScalingParams, margin: f64) -> Result<Regime> {
    if !(margin >= 1.0) {
        return Err(Error::Domain(format!(
            "margin = {margin} must be at least 1"
        )));
    }
    Ok(regime_from_threshold(n, n_threshold(cfg, p), margin))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleComplexity {
    pub n: f64,
    pub active: f64,
}

/// Samples and active parameters needed for excess risk `eps`.
///
/// In the transition band the larger of the two sample requirements is reported.
pub fn sample_complexity(
    eps: f64,
    p: &ScalingParams,
    r_route: f64,
    regime: Regime,
) -> Result<SampleComplexity> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("eps = {eps} must lie in (0, 1)")));
    }
    let (b, d) = (p.beta, p.d);
    let active = eps.powf(-d / b);
    let power = eps.powf(-(2.0 * b + d) / b);
    let routing = r_route / eps;
    let n = match regime {
        Regime::PowerLaw => power,
        Regime::RoutingDominated => routing,
        Regime::Transition => power.max(routing),
    };
    Ok(SampleComplexity { n, active })
}

/// Excess-risk increase from growing the expert pool `M1 -> M2` at fixed `k`.
pub fn m_effect_delta(
    k: usize,
    m1: usize,
    m2: usize,
    n: f64,
    blocks: usize,
    seq_len: usize,
) -> Result<f64> {
    if k == 0 || m1 < k {
        return Err(Error::Domain(format!(
            "need M1 >= k >= 1, got M1 = {m1}, k = {k}"
        )));
    }
    if m2 < m1 {
        return Err(Error::Domain(format!(
            "need M2 >= M1, got M2 = {m2}, M1 = {m1}"
        )));
    }
    Ok((blocks * seq_len * k) as f64 / n * (m2 as f64 / m1 as f64).ln())
}

/// True iff `ln(eM/k) · margin <= N_act / (L_T ℓ k)`.
pub fn routing_negligible(cfg: &ArchConfig, counts: &ParamCounts, margin: f64) -> bool {
    let log_term = 1.0 + (cfg.experts as f64 / cfg.k as f64).ln();
    let per_slot = counts.active_budget as f64 / (cfg.blocks * cfg.seq_len * cfg.k) as f64;
    log_term * margin <= per_slot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::active_budget;
    use proptest::prelude::*;

    fn row1() -> ArchConfig {
        ArchConfig {
            ambient_dim: 512,
            seq_len: 256,
            emb_dim: 512,
            heads: 4,
            blocks: 2,
            experts: 8,
            k: 2,
            ffn_depth: 2,
            ffn_width: 256,
            weight_bound: 1.0,
            output_bound: 1.0,
            input_bound: 1.0,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn master_bound_examples() {
        let p = ScalingParams::new(1.0, 4.0).unwrap();
        let b = master_bound(1e4, 1e6, 1221.8, &p, &BoundConstants::default());
        assert!(rel(b.approx_term, 0.01) < 1e-12);
        assert!(rel(b.est_term, 0.01) < 1e-12);
        assert!(rel(b.routing_term, 0.0012218) < 1e-12);
        assert!(rel(b.total, 0.0212218) < 1e-12);
        assert_eq!(b.dominant, DominantTerm::Approximation);

        let b = master_bound(1.0, 1e18, 0.0, &p, &BoundConstants::default());
        assert!((b.total - 1.0).abs() < 1e-17);
        assert!((estimation_crossover(1e6, &p) - 1e4).abs() < 1e-6);
    }

    #[test]
    fn dominant_ties_prefer_listed_order() {
        let p = ScalingParams::new(1.0, 4.0).unwrap();
        // approx = est = 0.01 at N = 1e4, n = 1e6
        let b = master_bound(1e4, 1e6, 0.0, &p, &BoundConstants::default());
        assert_eq!(b.dominant, DominantTerm::Approximation);
        let b = master_bound(1e4, 1e6, 1e4, &p, &BoundConstants::default());
        assert_eq!(b.dominant, DominantTerm::Approximation);
        let b = master_bound(1e4, 1e6, 2e4, &p, &BoundConstants::default());
        assert_eq!(b.dominant, DominantTerm::Routing);
    }

    #[test]
    fn master_bound_minimizer_near_balance() {
        // the exact minimizer is ((2β/d) n)^{d/(2β+d)}; the balance point
        // n^{d/(2β+d)} sits within one factor-2 step of it here
        let p = ScalingParams::new(1.0, 4.0).unwrap();
        let n = 1e6;
        let grid: Vec<f64> = (0..=40).map(|i| 2f64.powi(i)).collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| {
                let fa = master_bound(*a, n, 100.0, &p, &BoundConstants::default()).total;
                let fb = master_bound(*b, n, 100.0, &p, &BoundConstants::default()).total;
                fa.total_cmp(&fb)
            })
            .unwrap();
        let balance = estimation_crossover(n, &p);
        assert!(
            best / balance <= 2.0 && balance / best <= 2.0,
            "{best} vs {balance}"
        );
    }

    #[test]
    fn covering_examples() {
        let cfg = row1();
        let counts = active_budget(&cfg).unwrap();
        let unit = CoverConstants::default();
        let v = covering_bound(&cfg, &counts, 0.1, &unit).unwrap();
        let expected = (1_048_576.0 + 4.0 * 262_912.0) * 10f64.ln() + routing_term(&cfg);
        assert!(rel(v, expected) < 1e-12);

        // C2 κ R M0 / δ = 1 leaves only the routing part
        let c = CoverConstants { c2: 0.5, ..unit };
        let v = covering_bound(&cfg, &counts, 0.5, &c).unwrap();
        assert!(rel(v, routing_term(&cfg)) < 1e-12);

        assert!(covering_bound(&cfg, &counts, 1.0, &unit).is_err());
        assert!(covering_bound(&cfg, &counts, 0.0, &unit).is_err());

        let mut wider = cfg.clone();
        wider.k = 4;
        let counts4 = active_budget(&wider).unwrap();
        assert!(covering_bound(&wider, &counts4, 0.1, &unit).unwrap() > v);
    }

    #[test]
    fn erm_examples() {
        assert_eq!(erm_excess_bound(0.0, 0.0, 17.0, 0.0), 0.0);
        assert!((erm_excess_bound(0.01, 100.0, 1e4, 0.001) - 0.021).abs() < 1e-15);
        assert!(
            erm_excess_bound(0.01, 100.0, 1e5, 0.001) <= erm_excess_bound(0.01, 100.0, 1e4, 0.001)
        );
    }

    #[test]
    fn exponent_table_rows() {
        let e = theoretical_exponents(&ScalingParams::new(1.0, 32.0).unwrap());
        assert!((e.alpha_n - 0.0625).abs() < 1e-4);
        assert!((e.alpha_d - 0.0588).abs() < 1e-4);
        assert!((e.alpha_c - 0.0303).abs() < 1e-4);
        let e = theoretical_exponents(&ScalingParams::new(1.0, 23.0).unwrap());
        assert!((e.alpha_n - 0.0870).abs() < 1e-4);
        assert!((e.alpha_d - 0.0800).abs() < 1e-4);
        assert!((e.alpha_c - 0.0417).abs() < 1e-4);
        let e = theoretical_exponents(&ScalingParams::new(1.5, 45.0).unwrap());
        assert!((e.alpha_n - 0.0667).abs() < 1e-4);
        assert!((e.alpha_d - 0.0625).abs() < 1e-4);
        assert!((e.alpha_c - 0.0323).abs() < 1e-4);
    }

    #[test]
    fn crossovers() {
        let p = ScalingParams::new(1.0, 4.0).unwrap();
        let v = routing_crossover_from_term(1e6, 1221.8, &p).unwrap();
        assert!(rel(v, (1e6f64 / 1221.8).powi(2)) < 1e-12);
        assert!((v - 669_900.0).abs() < 100.0);
        assert!((routing_crossover_from_term(1221.8, 1221.8, &p).unwrap() - 1.0).abs() < 1e-12);
        let half = routing_crossover_from_term(1e6, 610.9, &p).unwrap();
        assert!(rel(half / v, 4.0) < 1e-12);
        assert!(routing_crossover_from_term(1e6, 0.0, &p).is_err());
        assert_eq!(estimation_crossover(1.0, &p), 1.0);
        let wide = ScalingParams::new(1.0, 1e9).unwrap();
        assert!(rel(estimation_crossover(1e6, &wide), 1e6) < 1e-6);
    }

    #[test]
    fn thresholds_and_regimes() {
        let mut cfg = row1();
        cfg.seq_len = 128;
        let p = ScalingParams::new(1.0, 4.0).unwrap();
        let thr = n_threshold(&cfg, &p);
        assert!((thr - routing_term(&cfg).powf(1.5)).abs() < 1e-9 * thr);
        assert!((thr - 42_710.0).abs() < 10.0, "{thr}");
        assert_eq!(n_threshold_from_term(1.0, &p), 1.0);
        let q = ScalingParams::new(1.0, 40.0).unwrap();
        assert!(n_threshold(&cfg, &q) < thr);

        let m = 2.0;
        assert_eq!(
            regime_from_threshold(thr / (2.0 * m), thr, m),
            Regime::RoutingDominated
        );
        assert_eq!(
            regime_from_threshold(2.0 * m * thr, thr, m),
            Regime::PowerLaw
        );
        assert_eq!(regime_from_threshold(thr, thr, m), Regime::Transition);
        assert!(regime_classify(1.0, &cfg, &p, 0.5).is_err());
    }

    #[test]
    fn sample_complexity_examples() {
        let p = ScalingParams::new(1.0, 2.0).unwrap();
        let s = sample_complexity(0.1, &p, 1221.8, Regime::PowerLaw).unwrap();
        assert!(rel(s.n, 1e4) < 1e-12);
        assert!(rel(s.active, 100.0) < 1e-12);
        let s = sample_complexity(0.01, &p, 1221.8, Regime::RoutingDominated).unwrap();
        assert!(rel(s.n, 122_180.0) < 1e-12);
        let s = sample_complexity(1.0 - 1e-12, &p, 1.0, Regime::PowerLaw).unwrap();
        assert!((s.n - 1.0).abs() < 1e-9);
        assert!(sample_complexity(1.0, &p, 1.0, Regime::PowerLaw).is_err());
    }

    #[test]
    fn m_effect_examples() {
        assert_eq!(m_effect_delta(2, 8, 8, 1e5, 2, 128).unwrap(), 0.0);
        let v = m_effect_delta(2, 8, 16, 1e5, 2, 128).unwrap();
        assert!((v - 0.003549).abs() < 1e-6);
        let rho = 5;
        let v = m_effect_delta(3, 3, 3 * rho, 1e4, 2, 7).unwrap();
        assert!(rel(v, 42.0 / 1e4 * (rho as f64).ln()) < 1e-12);
        assert!(m_effect_delta(4, 2, 8, 1e5, 1, 1).is_err());
        assert!(m_effect_delta(2, 8, 4, 1e5, 1, 1).is_err());
    }

    #[test]
    fn routing_negligibility() {
        let cfg = row1();
        let counts = active_budget(&cfg).unwrap();
        assert!(routing_negligible(&cfg, &counts, 10.0));
        let mut long = cfg.clone();
        long.seq_len = (counts.active_budget / 4) as usize;
        assert!(!routing_negligible(&long, &counts, 10.0));
        let mut dense = cfg.clone();
        dense.experts = 2;
        assert!(routing_negligible(&dense, &counts, 1.5));
    }

    proptest! {
        #[test]
        fn identities_hold(beta in 0.01f64..=10.0, d in 1.0f64..=100.0) {
            let e = theoretical_exponents(&ScalingParams { beta, d });
            prop_assert!(rel(e.predicted_data_exponent(), e.alpha_d) < 1e-12);
            prop_assert!(rel(e.predicted_compute_exponent(), e.alpha_c) < 1e-12);
        }

        #[test]
        fn m_effect_telescopes(k in 1usize..8, a in 0usize..50, b in 0usize..50, c in 0usize..50,
                               n in 1e2f64..1e9) {
            let m1 = k + a;
            let m2 = m1 + b;
            let m3 = m2 + c;
            let whole = m_effect_delta(k, m1, m3, n, 3, 17).unwrap();
            let parts = m_effect_delta(k, m1, m2, n, 3, 17).unwrap()
                + m_effect_delta(k, m2, m3, n, 3, 17).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1e-300) + 1e-18);
        }

        #[test]
        fn covering_monotone(k in 1usize..4, blocks in 1usize..4, seq in 1usize..64,
                             delta in 0.01f64..0.5) {
            let mut cfg = row1();
            cfg.k = k;
            cfg.blocks = blocks;
            cfg.seq_len = seq;
            let unit = CoverConstants::default();
            let base = covering_bound(&cfg, &active_budget(&cfg).unwrap(), delta, &unit).unwrap();
            for bump in 0..3 {
                let mut c2 = cfg.clone();
                match bump {
                    0 => c2.k += 1,
                    1 => c2.blocks += 1,
                    _ => c2.seq_len += 1,
                }
                let v = covering_bound(&c2, &active_budget(&c2).unwrap(), delta, &unit).unwrap();
                prop_assert!(v > base);
            }
            let smaller = covering_bound(&cfg, &active_budget(&cfg).unwrap(), delta * 0.9, &unit).unwrap();
            prop_assert!(smaller > base);
        }

        #[test]
        fn power_law_regime_is_absorbing(n0 in 1.0f64..1e7, factor in 1.0f64..1e3, margin in 1.0f64..5.0) {
            let mut cfg = row1();
            cfg.seq_len = 16;
            let p = ScalingParams::new(1.0, 8.0).unwrap();
            if regime_classify(n0, &cfg, &p, margin).unwrap() == Regime::PowerLaw {
                prop_assert_eq!(regime_classify(n0 * factor, &cfg, &p, margin).unwrap(), Regime::PowerLaw);
            }
        }
    }
}
