//! Architecture configuration, active-parameter accounting and routing-pattern
//! combinatorics.
//!
//! Counting convention: attention contributes the four projection matrices
//! (`W_Q`, `W_K`, `W_V`, `W_O`) without biases, experts contribute weights and
//! biases, LayerNorm and router parameters are not counted. This is the
//! convention under which the reference sweep (`d_emb = 512`, `m = 4`,
//! `M = 8`, `k = 2`) reports `N_act = 3,148,800` for two blocks of width 256.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The architecture tuple every bound is expressed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Ambient input dimension `D`.
    pub ambient_dim: usize,
    /// Sequence length `ℓ`.
    pub seq_len: usize,
    /// Embedding width `d_emb`.
    pub emb_dim: usize,
    /// Attention heads `m`.
    pub heads: usize,
    /// Transformer blocks `L_T`.
    pub blocks: usize,
    /// Experts per MoE layer `M`.
    pub experts: usize,
    /// Active experts per token.
    pub k: usize,
    /// Expert MLP depth (number of affine layers, at least 2).
    pub ffn_depth: usize,
    /// Expert MLP hidden width.
    pub ffn_width: usize,
    /// Entry-wise parameter bound `κ`.
    pub weight_bound: f64,
    /// Output bound `R`.
    pub output_bound: f64,
    /// Input bound `M0`.
    pub input_bound: f64,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ambient_dim", self.ambient_dim),
            ("seq_len", self.seq_len),
            ("emb_dim", self.emb_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("experts", self.experts),
            ("k", self.k),
            ("ffn_width", self.ffn_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.k > self.experts {
            return Err(Error::InvalidConfig(format!(
                "k = {} exceeds experts = {}",
                self.k, self.experts
            )));
        }
        if !self.emb_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "emb_dim = {} is not divisible by heads = {}",
                self.emb_dim, self.heads
            )));
        }
        if self.ffn_depth < 2 {
            return Err(Error::InvalidConfig(format!(
                "ffn_depth = {} must be at least 2",
                self.ffn_depth
            )));
        }
        for (name, v) in [
            ("weight_bound", self.weight_bound),
            ("output_bound", self.output_bound),
            ("input_bound", self.input_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Per-head dimension `d_emb / m`.
    pub fn head_dim(&self) -> usize {
        self.emb_dim / self.heads
    }
}

/// Parameter counts of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub attn_per_block: u64,
    pub expert_params: u64,
    pub active_budget: u64,
}

/// Which parameters enter the active budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetMode {
    /// Attention plus the `k` routed experts in every block.
    #[default]
    AttentionAndExperts,
    /// Experts only (`L_T · k · Π_exp`), for the experts-dominate regime.
    ExpertsOnly,
}

pub fn attn_params(cfg: &ArchConfig) -> u64 {
    let d = cfg.emb_dim as u64;
    4 * d * d
}

pub fn expert_params(cfg: &ArchConfig) -> Result<u64> {
    if cfg.ffn_depth < 2 {
        return Err(Error::InvalidConfig(format!(
            "ffn_depth = {} must be at least 2",
            cfg.ffn_depth
        )));
    }
    let d = cfg.emb_dim as u64;
    let w = cfg.ffn_width as u64;
    let depth = cfg.ffn_depth as u64;
    let weights = 2 * d * w + (depth - 2) * w * w;
    let biases = w * (depth - 1) + d;
    Ok(weights + biases)
}

pub fn active_budget(cfg: &ArchConfig) -> Result<ParamCounts> {
    active_budget_with(cfg, BudgetMode::default())
}

pub fn active_budget_with(cfg: &ArchConfig, mode: BudgetMode) -> Result<ParamCounts> {
    cfg.validate()?;
    let attn = attn_params(cfg);
    let expert = expert_params(cfg)?;
    let blocks = cfg.blocks as u64;
    let k = cfg.k as u64;
    let active_budget = match mode {
        BudgetMode::AttentionAndExperts => blocks * (attn + k * expert),
        BudgetMode::ExpertsOnly => blocks * k * expert,
    };
    Ok(ParamCounts {
        attn_per_block: attn,
        expert_params: expert,
        active_budget,
    })
}

fn check_routing_args(experts: usize, k: usize, blocks: usize, seq_len: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= k <= M, got k = {k}, M = {experts}"
        )));
    }
    if blocks == 0 || seq_len == 0 {
        return Err(Error::InvalidConfig(
            "blocks and seq_len must be positive".into(),
        ));
    }
    Ok(())
}

/// Exact binomial coefficient.
pub fn binomial(n: usize, r: usize) -> BigUint {
    if r > n {
        return BigUint::ZERO;
    }
    let r = r.min(n - r);
    let mut acc = BigUint::one();
    for i in 0..r {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// `C(M, k)^(L_T · ℓ)`, the number of routing patterns.
pub fn pattern_count(experts: usize, k: usize, blocks: usize, seq_len: usize) -> Result<BigUint> {
    check_routing_args(experts, k, blocks, seq_len)?;
    let slots = blocks
        .checked_mul(seq_len)
        .and_then(|s| u32::try_from(s).ok())
        .ok_or_else(|| Error::InvalidConfig("blocks * seq_len too large".into()))?;
    Ok(binomial(experts, k).pow(slots))
}

/// Natural log of a big integer, accurate to f64 precision.
pub fn ln_biguint(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().map(f64::ln).unwrap_or(f64::NEG_INFINITY);
    }
    let shift = bits - 64;
    let top = (x >> shift).to_f64().unwrap_or(f64::NAN);
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

/// `L_T · ℓ · k · ln(eM/k)` in nats; an upper bound on `ln(pattern_count)`.
pub fn log_pattern_bound(experts: usize, k: usize, blocks: usize, seq_len: usize) -> f64 {
    (blocks * seq_len * k) as f64 * (1.0 + (experts as f64 / k as f64).ln())
}

pub fn routing_term(cfg: &ArchConfig) -> f64 {
    log_pattern_bound(cfg.experts, cfg.k, cfg.blocks, cfg.seq_len)
}

/// One k-subset of experts (1-based, ascending) per block and token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoutingPattern {
    /// `subsets[block][token]`.
    pub subsets: Vec<Vec<Vec<usize>>>,
}

impl RoutingPattern {
    /// Whether the pattern is a member of the pattern space for `(M, k, L_T, ℓ)`.
    pub fn is_member(&self, experts: usize, k: usize, blocks: usize, seq_len: usize) -> bool {
        self.subsets.len() == blocks
            && self.subsets.iter().all(|row| {
                row.len() == seq_len
                    && row.iter().all(|s| {
                        s.len() == k
                            && s.windows(2).all(|w| w[0] < w[1])
                            && s.iter().all(|&e| (1..=experts).contains(&e))
                    })
            })
    }

    fn flatten(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.subsets.iter().flatten()
    }
}

impl PartialOrd for RoutingPattern {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RoutingPattern {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.flatten().cmp(other.flatten())
    }
}

/// All k-subsets of `1..=n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut cur: Vec<usize> = (1..=k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Lexicographic stream over every routing pattern.
#[derive(Debug)]
pub struct PatternIter {
    combos: Vec<Vec<usize>>,
    blocks: usize,
    seq_len: usize,
    digits: Vec<usize>,
    done: bool,
}

impl Iterator for PatternIter {
    type Item = RoutingPattern;

    fn next(&mut self) -> Option<RoutingPattern> {
        if self.done {
            return None;
        }
        let subsets = (0..self.blocks)
            .map(|b| {
                (0..self.seq_len)
                    .map(|t| self.combos[self.digits[b * self.seq_len + t]].clone())
                    .collect()
            })
            .collect();
        // odometer, last slot fastest
        let base = self.combos.len();
        let mut i = self.digits.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.digits[i] += 1;
            if self.digits[i] < base {
                break;
            }
            self.digits[i] = 0;
        }
        Some(RoutingPattern { subsets })
    }
}

/// Enumerates every routing pattern, refusing when the exact count exceeds `limit`.
pub fn enumerate_patterns(
    experts: usize,
    k: usize,
    blocks: usize,
    seq_len: usize,
    limit: u64,
) -> Result<PatternIter> {
    let count = pattern_count(experts, k, blocks, seq_len)?;
    if count > BigUint::from(limit) {
        return Err(Error::EnumerationRefused { count, limit });
    }
    Ok(PatternIter {
        combos: combinations(experts, k),
        blocks,
        seq_len,
        digits: vec![0; blocks * seq_len],
        done: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table_row(blocks: usize, width: usize) -> ArchConfig {
        ArchConfig {
            ambient_dim: 512,
            seq_len: 256,
            emb_dim: 512,
            heads: 4,
            blocks,
            experts: 8,
            k: 2,
            ffn_depth: 2,
            ffn_width: width,
            weight_bound: 1.0,
            output_bound: 1.0,
            input_bound: 1.0,
        }
    }

    #[test]
    fn attention_counts() {
        let mut cfg = table_row(2, 256);
        assert_eq!(attn_params(&cfg), 1_048_576);
        cfg.emb_dim = 1;
        assert_eq!(attn_params(&cfg), 4);
        cfg.emb_dim = 2;
        assert_eq!(attn_params(&cfg), 16);
    }

    #[test]
    fn expert_counts() {
        let cfg = table_row(2, 256);
        assert_eq!(expert_params(&cfg).unwrap(), 262_912);
        assert_eq!(expert_params(&table_row(4, 1536)).unwrap(), 1_574_912);
        let mut tiny = table_row(1, 2);
        tiny.emb_dim = 2;
        tiny.heads = 1;
        assert_eq!(expert_params(&tiny).unwrap(), 12);
        tiny.ffn_depth = 1;
        assert!(matches!(expert_params(&tiny), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn table_rows() {
        assert_eq!(
            active_budget(&table_row(2, 256)).unwrap().active_budget,
            3_148_800
        );
        assert_eq!(
            active_budget(&table_row(4, 1536)).unwrap().active_budget,
            16_793_600
        );
        assert_eq!(
            active_budget(&table_row(8, 1024)).unwrap().active_budget,
            25_190_400
        );
    }

    #[test]
    fn experts_only_budget() {
        let c = active_budget_with(&table_row(2, 256), BudgetMode::ExpertsOnly).unwrap();
        assert_eq!(c.active_budget, 2 * 2 * 262_912);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = table_row(2, 256);
        cfg.k = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = table_row(2, 256);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = table_row(2, 256);
        cfg.weight_bound = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pattern_counts() {
        assert_eq!(pattern_count(8, 2, 1, 1).unwrap(), BigUint::from(28u32));
        assert_eq!(pattern_count(8, 2, 1, 2).unwrap(), BigUint::from(784u32));
        assert_eq!(pattern_count(5, 5, 3, 7).unwrap(), BigUint::one());
        assert!(pattern_count(2, 3, 1, 1).is_err());
    }

    #[test]
    fn log_bounds() {
        assert!((log_pattern_bound(8, 2, 1, 2) - 9.545).abs() < 1e-3);
        // 4·ln(16e) = 15.09
        assert!(
            (log_pattern_bound(64, 4, 1, 1) - 4.0 * (16.0 * std::f64::consts::E).ln()).abs()
                < 1e-12
        );
        assert!((log_pattern_bound(64, 4, 1, 1) - 15.09).abs() < 1e-2);
        assert_eq!(log_pattern_bound(3, 3, 2, 5), 30.0);
        let ln784 = ln_biguint(&pattern_count(8, 2, 1, 2).unwrap());
        assert!((ln784 - 6.664).abs() < 1e-3);
        assert!(ln784 <= log_pattern_bound(8, 2, 1, 2));
    }

    #[test]
    fn routing_terms() {
        let mut cfg = table_row(2, 256);
        cfg.seq_len = 128;
        assert!((routing_term(&cfg) - 1221.8).abs() < 0.05);
        cfg.experts = 2;
        assert_eq!(routing_term(&cfg), 512.0);
        let unit = ArchConfig {
            seq_len: 1,
            blocks: 1,
            experts: 1,
            k: 1,
            ..cfg
        };
        assert_eq!(routing_term(&unit), 1.0);
    }

    #[test]
    fn ln_of_huge_counts() {
        let c = pattern_count(8, 2, 2, 8).unwrap();
        let expected = 16.0 * 28f64.ln();
        assert!((ln_biguint(&c) - expected).abs() < 1e-9);
        let huge = pattern_count(64, 8, 4, 256).unwrap();
        let expected = 1024.0 * binomial(64, 8).to_f64().unwrap().ln();
        assert!((ln_biguint(&huge) - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn enumeration_small() {
        let all: Vec<_> = enumerate_patterns(2, 1, 1, 1, 100).unwrap().collect();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].subsets, vec![vec![vec![1]]]);
        assert_eq!(all[1].subsets, vec![vec![vec![2]]]);
        assert_eq!(enumerate_patterns(3, 2, 1, 1, 100).unwrap().count(), 3);
    }

    #[test]
    fn enumeration_order_and_membership() {
        let all: Vec<_> = enumerate_patterns(4, 2, 1, 2, 1000).unwrap().collect();
        assert_eq!(all.len(), 36);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert!(all.iter().all(|p| p.is_member(4, 2, 1, 2)));
    }

    #[test]
    fn enumeration_refusal_reports_count() {
        match enumerate_patterns(8, 2, 2, 8, 1_000_000) {
            Err(Error::EnumerationRefused { count, .. }) => {
                assert_eq!(count, BigUint::from(28u32).pow(16));
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn binomial_matches_subset_count() {
        for n in 0..=10usize {
            for r in 0..=n {
                let brute = (0u32..1 << n)
                    .filter(|m| m.count_ones() as usize == r)
                    .count();
                assert_eq!(binomial(n, r), BigUint::from(brute));
            }
        }
    }
}
