//! Closed-form commands: exponents, parameter accounting, routing counts and
//! the two allocation solvers.

use std::path::PathBuf;

use clap::Args;
use num_bigint::BigUint;
use serde::Serialize;

use moesl_core::accounting::{
    active_budget, enumerate_patterns, ln_biguint, log_pattern_bound, pattern_count, routing_term,
    ArchConfig,
};
use moesl_core::allocator::{
    compute_error_slope, compute_optimal as closed_form, compute_oracle_sweep, compute_sweep_draws,
    k_oracle_sweep, k_sweep_draws, optimal_k_fixed_point, optimal_k_grid, KObjectiveParams,
};
use moesl_core::bounds::{theoretical_exponents, ScalingParams};

use super::{broadcast, read_text};
use crate::{Cell, CliError, CliResult, Outcome, TableArtifact};

const BUNDLED_CONFIGS: &str = include_str!("../../data/sweep_configs.json");

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExponentsArgs {
    /// Intrinsic dimensions (repeatable or comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = [32.0, 45.0, 45.0, 23.0])]
    pub d: Vec<f64>,
    /// Smoothness values, broadcast against `--d`.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.5, 1.0])]
    pub beta: Vec<f64>,
}

pub fn exponents(args: &ExponentsArgs) -> CliResult<Outcome> {
    let mut t = TableArtifact::new(["d", "beta", "alpha_N", "alpha_D", "alpha_C", "consistency"]);
    for (d, beta) in broadcast(&args.d, &args.beta, ("d", "beta"))? {
        let e = theoretical_exponents(&ScalingParams::new(beta, d)?);
        t.push(vec![
            d.into(),
            beta.into(),
            e.alpha_n.into(),
            e.alpha_d.into(),
            e.alpha_c.into(),
            e.predicted_data_exponent().into(),
        ]);
    }
    Ok(Outcome::ok(t))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BudgetArgs {
    /// JSON file holding one config object or an array of them. Defaults to
    /// the bundled 14-model sweep.
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Parses one config object or an array of them; errors carry line and column.
pub fn parse_configs(text: &str, context: &str) -> CliResult<Vec<ArchConfig>> {
    let err = |e: serde_json::Error| CliError::data(context, e);
    if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(err)
    } else {
        serde_json::from_str(text).map(|c| vec![c]).map_err(err)
    }
}

pub fn budget(args: &BudgetArgs) -> CliResult<Outcome> {
    let (text, context) = match &args.config {
        Some(p) => (read_text(p)?, p.display().to_string()),
        None => (BUNDLED_CONFIGS.to_string(), "bundled sweep".to_string()),
    };
    let configs = parse_configs(&text, &context)?;
    let mut t = TableArtifact::new([
        "row",
        "blocks",
        "ffn_width",
        "attn_params",
        "expert_params",
        "n_act",
        "routing_term",
        "log_pattern_bound",
        "ln_pattern_count",
    ]);
    for (i, cfg) in configs.iter().enumerate() {
        let counts = active_budget(cfg)?;
        let exact = pattern_count(cfg.experts, cfg.k, cfg.blocks, cfg.seq_len)?;
        t.push(vec![
            i.into(),
            cfg.blocks.into(),
            cfg.ffn_width.into(),
            counts.attn_per_block.into(),
            counts.expert_params.into(),
            counts.active_budget.into(),
            routing_term(cfg).into(),
            log_pattern_bound(cfg.experts, cfg.k, cfg.blocks, cfg.seq_len).into(),
            ln_biguint(&exact).into(),
        ]);
    }
    Ok(Outcome::ok(t))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RoutingArgs {
    /// Experts per layer.
    #[arg(long = "M", default_value_t = 8)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    /// Tokens per sequence.
    #[arg(long, default_value_t = 2)]
    pub tokens: usize,
    /// Sweep every M <= 10, k <= M and blocks * tokens <= 4 instead.
    #[arg(long)]
    pub grid: bool,
    /// Enumerate patterns explicitly when the exact count is at most this.
    #[arg(long, default_value_t = 200_000)]
    pub enum_limit: u64,
}

struct RoutingCheck {
    count: BigUint,
    ln_count: f64,
    bound: f64,
    /// Number of enumerated patterns, zero when enumeration was skipped.
    enumerated: u64,
    enumeration_ok: bool,
}

fn routing_check(
    m: usize,
    k: usize,
    blocks: usize,
    tokens: usize,
    limit: u64,
) -> CliResult<RoutingCheck> {
    let count = pattern_count(m, k, blocks, tokens)?;
    let ln_count = ln_biguint(&count);
    let bound = log_pattern_bound(m, k, blocks, tokens);
    let (enumerated, enumeration_ok) = if count <= BigUint::from(limit) {
        let mut seen = 0u64;
        let mut ok = true;
        let mut prev = None;
        for p in enumerate_patterns(m, k, blocks, tokens, limit)? {
            ok &= p.is_member(m, k, blocks, tokens);
            // lexicographic order, so strictly increasing means all distinct
            if let Some(q) = &prev {
                ok &= *q < p;
            }
            prev = Some(p);
            seen += 1;
        }
        (seen, ok && BigUint::from(seen) == count)
    } else {
        (0, true)
    };
    Ok(RoutingCheck {
        count,
        ln_count,
        bound,
        enumerated,
        enumeration_ok,
    })
}

pub fn routing(args: &RoutingArgs) -> CliResult<Outcome> {
    let mut cases = Vec::new();
    if args.grid {
        for m in 1..=10 {
            for k in 1..=m {
                for blocks in 1..=4 {
                    for tokens in 1..=4 / blocks {
                        cases.push((m, k, blocks, tokens));
                    }
                }
            }
        }
    } else {
        cases.push((args.experts, args.k, args.blocks, args.tokens));
    }
    let mut t = TableArtifact::new([
        "M",
        "k",
        "blocks",
        "tokens",
        "exact_count",
        "ln_exact_count",
        "log_bound",
        "enumerated",
        "holds",
    ]);
    let mut violations = Vec::new();
    for (m, k, blocks, tokens) in cases {
        let c = routing_check(m, k, blocks, tokens, args.enum_limit)?;
        let holds = c.ln_count <= c.bound && c.enumeration_ok;
        if c.ln_count > c.bound {
            violations.push(format!(
                "M={m} k={k} blocks={blocks} tokens={tokens}: ln count {} exceeds bound {}",
                c.ln_count, c.bound
            ));
        }
        if !c.enumeration_ok {
            violations.push(format!(
                "M={m} k={k} blocks={blocks} tokens={tokens}: enumeration disagrees with the count"
            ));
        }
        t.push(vec![
            m.into(),
            k.into(),
            blocks.into(),
            tokens.into(),
            Cell::Text(c.count.to_string()),
            c.ln_count.into(),
            c.bound.into(),
            c.enumerated.into(),
            holds.into(),
        ]);
    }
    Ok(Outcome {
        table: t,
        violations,
    })
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimalKArgs {
    /// Run the fixed-point vs grid comparison over this many seeded draws.
    #[arg(long)]
    pub sweep: Option<usize>,
    /// Per-expert scale `A = L_T · Π_exp`.
    #[arg(long, required_unless_present = "sweep")]
    pub a: Option<f64>,
    /// Sample count.
    #[arg(long, required_unless_present = "sweep")]
    pub n: Option<f64>,
    #[arg(long, required_unless_present = "sweep")]
    pub blocks: Option<usize>,
    #[arg(long, required_unless_present = "sweep")]
    pub tokens: Option<usize>,
    /// Experts per layer.
    #[arg(long = "M", required_unless_present = "sweep")]
    pub experts: Option<usize>,
    #[arg(long, required_unless_present = "sweep")]
    pub beta: Option<f64>,
    #[arg(long, required_unless_present = "sweep")]
    pub d: Option<f64>,
    /// Minimum fixed-point vs grid agreement rate for a sweep.
    #[arg(long, default_value_t = 0.95)]
    pub min_agreement: f64,
}

const K_COLUMNS: [&str; 13] = [
    "beta",
    "d",
    "M",
    "n",
    "A",
    "blocks",
    "tokens",
    "k_star",
    "k_grid",
    "k_continuous",
    "lower",
    "upper",
    "in_sandwich",
];

fn in_expanded(k: usize, lower: f64, upper: f64) -> bool {
    k as f64 >= lower / 2.0 && k as f64 <= 2.0 * upper
}

fn k_row(
    p: &KObjectiveParams,
    k_star: usize,
    grid: usize,
    k_cont: f64,
    lo: f64,
    hi: f64,
) -> Vec<Cell> {
    vec![
        p.scaling.beta.into(),
        p.scaling.d.into(),
        p.experts.into(),
        p.n.into(),
        p.a.into(),
        p.blocks.into(),
        p.seq_len.into(),
        k_star.into(),
        grid.into(),
        k_cont.into(),
        lo.into(),
        hi.into(),
        in_expanded(k_star, lo, hi).into(),
    ]
}

pub fn optimal_k(args: &OptimalKArgs, seed: u64) -> CliResult<Outcome> {
    let mut t = TableArtifact::new(K_COLUMNS);
    let mut violations = Vec::new();
    if let Some(count) = args.sweep {
        let report = k_oracle_sweep(&k_sweep_draws(seed, count))?;
        for r in &report.rows {
            let s = &r.fixed_point;
            t.push(k_row(
                &r.params,
                s.k_star,
                r.grid,
                s.k_continuous,
                s.lower,
                s.upper,
            ));
        }
        t.note("draws", count);
        t.note("agreement_rate", report.agreement_rate);
        t.note("fixed_in_sandwich_rate", report.fixed_in_sandwich_rate);
        t.note("grid_in_sandwich_rate", report.grid_in_sandwich_rate);
        t.note(
            "grid_in_unit_sandwich_rate",
            report.grid_in_unit_sandwich_rate,
        );
        if report.agreement_rate < args.min_agreement {
            violations.push(format!(
                "agreement rate {} below {}",
                report.agreement_rate, args.min_agreement
            ));
        }
        let outside = report.rows.iter().filter(|r| !r.fixed_in_sandwich).count();
        if outside > 0 {
            violations.push(format!(
                "{outside} fixed-point solutions outside the sandwich"
            ));
        }
    } else {
        let p = KObjectiveParams {
            a: args.a.unwrap(),
            n: args.n.unwrap(),
            blocks: args.blocks.unwrap(),
            seq_len: args.tokens.unwrap(),
            experts: args.experts.unwrap(),
            scaling: ScalingParams::new(args.beta.unwrap(), args.d.unwrap())?,
        };
        let s = optimal_k_fixed_point(&p, 1e-9, 500)?;
        let grid = optimal_k_grid(&p)?;
        t.push(k_row(&p, s.k_star, grid, s.k_continuous, s.lower, s.upper));
        t.note("iterations", s.iterations);
        t.note("converged", s.converged);
        if !in_expanded(s.k_star, s.lower, s.upper) {
            violations.push(format!("k* = {} outside the sandwich", s.k_star));
        }
    }
    Ok(Outcome {
        table: t,
        violations,
    })
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ComputeArgs {
    /// Compare closed form and grid over this many seeded draws.
    #[arg(long)]
    pub sweep: Option<usize>,
    /// Compute budget `C = n · N_act`.
    #[arg(long, required_unless_present = "sweep")]
    pub budget: Option<f64>,
    /// Approximation constant.
    #[arg(long, required_unless_present = "sweep")]
    pub a: Option<f64>,
    /// Estimation constant.
    #[arg(long, required_unless_present = "sweep")]
    pub b: Option<f64>,
    #[arg(long, required_unless_present = "sweep")]
    pub beta: Option<f64>,
    #[arg(long, required_unless_present = "sweep")]
    pub d: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub grid_points: usize,
    /// Largest accepted closed-form vs grid relative difference.
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
    /// Largest accepted gap between the fitted and predicted error slope.
    #[arg(long, default_value_t = 1e-3)]
    pub slope_tolerance: f64,
}

/// Budgets `1e6, 1e7, …, 1e14` used for the error-slope fit.
pub fn slope_budgets() -> Vec<f64> {
    (6..=14).map(|e| 10f64.powi(e)).collect()
}

pub fn compute_optimal(args: &ComputeArgs, seed: u64) -> CliResult<Outcome> {
    let mut t = TableArtifact::new([
        "budget",
        "A",
        "B",
        "beta",
        "d",
        "n_active",
        "n_samples",
        "error_at_opt",
        "grid_n_active",
        "rel_diff",
        "error_slope",
        "predicted_slope",
    ]);
    let draws = match args.sweep {
        Some(count) => compute_sweep_draws(seed, count),
        None => vec![moesl_core::allocator::ComputeDraw {
            budget: args.budget.unwrap(),
            a: args.a.unwrap(),
            b: args.b.unwrap(),
            scaling: ScalingParams::new(args.beta.unwrap(), args.d.unwrap())?,
        }],
    };
    let rows = compute_oracle_sweep(&draws, args.grid_points)?;
    let budgets = slope_budgets();
    let mut violations = Vec::new();
    let mut max_rel = 0.0f64;
    let mut max_slope_gap = 0.0f64;
    for (i, r) in rows.iter().enumerate() {
        let d = &r.draw;
        let opt = closed_form(d.budget, d.a, d.b, &d.scaling)?;
        let slope = compute_error_slope(&budgets, d.a, d.b, &d.scaling)?;
        let predicted = -d.scaling.beta / (d.scaling.beta + d.scaling.d);
        max_rel = max_rel.max(r.rel_diff);
        max_slope_gap = max_slope_gap.max((slope - predicted).abs());
        if r.rel_diff > args.tolerance {
            violations.push(format!(
                "row {i}: grid differs from closed form by {}",
                r.rel_diff
            ));
        }
        if (slope - predicted).abs() > args.slope_tolerance {
            violations.push(format!(
                "row {i}: error slope {slope} vs predicted {predicted}"
            ));
        }
        t.push(vec![
            d.budget.into(),
            d.a.into(),
            d.b.into(),
            d.scaling.beta.into(),
            d.scaling.d.into(),
            opt.n_active.into(),
            opt.n_samples.into(),
            opt.error_at_opt.into(),
            r.grid.into(),
            r.rel_diff.into(),
            slope.into(),
            predicted.into(),
        ]);
    }
    t.note("max_rel_diff", max_rel);
    t.note("max_slope_gap", max_slope_gap);
    Ok(Outcome {
        table: t,
        violations,
    })
}
