//! Approximation-rate experiments and the softmax / forward-pass checks.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use moesl_core::approx_lab::{
    rate_experiment, Cover, Manifold, PartitionOfUnity, Target, EVAL_POINTS,
};
use moesl_core::moe_forward::{
    estimate_input_lipschitz, lparam_formula, perturb_stability, random_input, read_model,
    row_softmax_lip_check, small_config, softmax_lip_check, MoEModel,
};

use super::read_bytes;
use crate::{CliError, CliResult, Outcome, TableArtifact};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldArg {
    Circle,
    Interval,
}

/// `sin:F`, `const:C`, `linear:S:O`, `square` or `exp`.
pub fn parse_target(s: &str) -> Result<Target, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<f64, String> {
        parts
            .get(i)
            .ok_or_else(|| format!("target `{s}` is missing a parameter"))?
            .parse::<f64>()
            .map_err(|e| format!("target `{s}`: {e}"))
    };
    let target = match parts[0] {
        "sin" => Target::Sine { freq: num(1)? },
        "const" => Target::Constant(num(1)?),
        "linear" => Target::Linear {
            slope: num(1)?,
            offset: num(2)?,
        },
        "square" => Target::Square,
        "exp" => Target::Exp,
        other => return Err(format!("unknown target `{other}`")),
    };
    let arity = match target {
        Target::Sine { .. } | Target::Constant(_) => 2,
        Target::Linear { .. } => 3,
        _ => 1,
    };
    if parts.len() != arity {
        return Err(format!("target `{s}` takes {} parameter(s)", arity - 1));
    }
    Ok(target)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RateArgs {
    #[arg(long, value_enum, default_value_t = ManifoldArg::Circle)]
    pub manifold: ManifoldArg,
    /// Interval start (interval manifold only).
    #[arg(long, default_value_t = 0.0)]
    pub a: f64,
    /// Interval end (interval manifold only).
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    #[arg(long, value_parser = parse_target, default_value = "sin:3")]
    pub target: Target,
    /// Smoothness; experts have degree `ceil(beta) - 1`.
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Chart counts, increasing.
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64, 128])]
    pub charts: Vec<usize>,
    /// Active experts per point; the cover overlap when absent.
    #[arg(long)]
    pub k: Option<usize>,
}

/// Largest `|Σ_j w_j(x) - 1|` over the evaluation grid.
pub fn partition_defect(manifold: &Manifold, charts: usize) -> CliResult<f64> {
    let cover = Cover::with_count(manifold, charts)?;
    let pou = PartitionOfUnity::new(manifold.clone(), cover);
    Ok(manifold
        .grid(EVAL_POINTS)
        .into_iter()
        .map(|x| (pou.weights(x).iter().map(|w| w.1).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

pub fn approx_rate(args: &RateArgs) -> CliResult<Outcome> {
    let manifold = match args.manifold {
        ManifoldArg::Circle => Manifold::circle()?,
        ManifoldArg::Interval => Manifold::interval(args.a, args.b)?,
    };
    let report = rate_experiment(&args.target, &manifold, args.beta, &args.charts, args.k)?;
    let mut t = TableArtifact::new(["M", "rho", "sup_error"]);
    for r in &report.rows {
        t.push(vec![r.charts.into(), r.rho.into(), r.sup_error.into()]);
    }
    let mut violations = Vec::new();
    let mut defect = 0.0f64;
    for &m in &args.charts {
        defect = defect.max(partition_defect(&manifold, m)?);
    }
    if defect > 1e-9 {
        violations.push(format!("partition of unity off by {defect}"));
    }
    match report.slope {
        Some(s) => t.note("slope", s),
        None => t.note("slope", "none"),
    }
    // d = 1 for both manifolds
    t.note("predicted_slope", -args.beta);
    t.note("degenerate", report.degenerate);
    t.note("pou_max_defect", defect);
    Ok(Outcome {
        table: t,
        violations,
    })
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LipschitzArgs {
    /// Temperatures for the softmax check.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0])]
    pub tau: Vec<f64>,
    /// Vector length (rows of the score matrix with `--row-wise`).
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Pairs per temperature, or perturbation directions with `--stability`.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Check the row-wise softmax on square score matrices.
    #[arg(long)]
    pub row_wise: bool,
    /// Forward-pass stability under parameter perturbation instead.
    #[arg(long)]
    pub stability: bool,
    /// Model file for `--stability`; the seeded small model when absent.
    #[arg(long, requires = "stability")]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    /// Perturbation sizes for `--stability`.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1e-5, 1e-4, 1e-3])]
    pub eta: Vec<f64>,
}

pub const DEFAULT_PAIRS: usize = 400_000;
pub const DEFAULT_DIRECTIONS: usize = 32;

pub fn lipschitz(args: &LipschitzArgs, seed: u64) -> CliResult<Outcome> {
    if args.stability {
        return stability(args, seed);
    }
    let trials = args.trials.unwrap_or(DEFAULT_PAIRS);
    let mut t = TableArtifact::new([
        "tau",
        "dim",
        "trials",
        "skipped",
        "max_ratio",
        "bound",
        "violations",
    ]);
    let mut violations = Vec::new();
    for (i, &tau) in args.tau.iter().enumerate() {
        // one seed per temperature so the lists can be extended without reshuffling
        let s = seed.wrapping_add(i as u64);
        let r = if args.row_wise {
            row_softmax_lip_check(tau, args.dim, trials, s)?
        } else {
            softmax_lip_check(tau, args.dim, trials, s)?
        };
        if r.violations > 0 {
            violations.push(format!(
                "tau = {tau}: {} pairs exceed 1/(2 tau)",
                r.violations
            ));
        }
        t.push(vec![
            r.tau.into(),
            r.dim.into(),
            r.trials.into(),
            r.skipped.into(),
            r.max_ratio.into(),
            r.bound.into(),
            r.violations.into(),
        ]);
    }
    Ok(Outcome {
        table: t,
        violations,
    })
}

fn stability(args: &LipschitzArgs, seed: u64) -> CliResult<Outcome> {
    let model = match &args.model {
        Some(path) => read_model(read_bytes(path)?.as_slice())?,
        None => MoEModel::random(&small_config(), seed)?,
    };
    let cfg = &model.cfg;
    let h0 = random_input(cfg, seed.wrapping_add(1));
    let trials = args.trials.unwrap_or(DEFAULT_DIRECTIONS);
    let report = perturb_stability(&model, &h0, &args.eta, trials, seed.wrapping_add(2))?;
    let l_in_hat = estimate_input_lipschitz(&model, &h0, trials, 1e-6, seed.wrapping_add(3))?;
    let l_in = l_in_hat.max(1.0);
    let bound = lparam_formula(cfg, l_in)?;
    let base = model.forward(&h0)?;
    let repeat = model.forward(&h0)?;

    let mut t = TableArtifact::new(["eta", "max_delta", "ratio"]);
    for r in &report.rows {
        t.push(vec![r.eta.into(), r.max_delta.into(), r.ratio.into()]);
    }
    let spread = report.ratio_spread();
    let mut violations = Vec::new();
    if base != repeat {
        violations.push("forward pass is not deterministic".to_string());
    }
    if report
        .rows
        .iter()
        .any(|r| r.eta == 0.0 && r.max_delta != 0.0)
    {
        violations.push("eta = 0 changed the output".to_string());
    }
    if report.trials == 0 {
        return Err(CliError::Usage(
            "every perturbation direction changed the routing; use smaller --eta values".into(),
        ));
    }
    if spread.is_nan() || spread >= 2.0 {
        violations.push(format!("ratio spread {spread} is not below 2"));
    }
    if let Some(r) = report.rows.iter().find(|r| r.ratio > bound) {
        violations.push(format!(
            "eta = {}: ratio {} exceeds the bound {bound}",
            r.eta, r.ratio
        ));
    }
    t.note("accepted_trials", report.trials);
    t.note("redraws", report.redraws);
    t.note("flagged", report.flagged);
    t.note("ratio_spread", spread);
    t.note("l_in_estimate", l_in_hat);
    t.note("lparam_bound", bound);
    Ok(Outcome {
        table: t,
        violations,
    })
}
