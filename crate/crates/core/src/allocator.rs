//! Allocation solvers: the optimal number of active experts `k*` and the
//! compute-optimal split of a budget between active parameters and data.
//!
//! Each closed-form or iterative solver has a brute-force grid oracle next to
//! it; sweeps over seeded random draws compare the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::ScalingParams;
use crate::error::{Error, Result};
use crate::numeric::{golden_section, logspace, ols};

/// Inputs of the k-objective `E(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KObjectiveParams {
    /// `A = L_T · Π_exp`.
    pub a: f64,
    /// Sample count.
    pub n: f64,
    pub blocks: usize,
    pub seq_len: usize,
    pub experts: usize,
    pub scaling: ScalingParams,
}

impl KObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        self.scaling.validate()?;
        if !(self.a > 0.0) {
            return Err(Error::Domain(format!("A = {} must be positive", self.a)));
        }
        if !(self.n >= 1.0) {
            return Err(Error::Domain(format!("n = {} must be at least 1", self.n)));
        }
        if self.experts == 0 || self.blocks == 0 || self.seq_len == 0 {
            return Err(Error::Domain("M, L_T and seq_len must be positive".into()));
        }
        Ok(())
    }

    fn routing_weight(&self) -> f64 {
        (self.blocks * self.seq_len) as f64
    }

    /// `d / (2β + d)`.
    fn rate(&self) -> f64 {
        let (b, d) = (self.scaling.beta, self.scaling.d);
        d / (2.0 * b + d)
    }

    fn unchecked_objective(&self, k: f64) -> f64 {
        let a_exp = self.scaling.model_exponent();
        let m = self.experts as f64;
        (self.a * k).powf(-a_exp)
            + self.a * k / self.n
            + self.routing_weight() * k * (1.0 + (m / k).ln()) / self.n
    }
}

/// `(A k)^{-2β/d} + A k / n + L_T ℓ k ln(eM/k) / n`.
pub fn k_objective(k: f64, p: &KObjectiveParams) -> Result<f64> {
    if !(k >= 1.0 && k <= p.experts as f64) {
        return Err(Error::Domain(format!("k = {k} outside [1, {}]", p.experts)));
    }
    Ok(p.unchecked_objective(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KSolution {
    pub k_star: usize,
    pub k_continuous: f64,
    pub iterations: usize,
    pub lower: f64,
    pub upper: f64,
    pub capped: bool,
    pub converged: bool,
    /// The iterate denominator hit its positivity guard.
    pub denominator_clamped: bool,
}

/// Constant applied to both ends of the `k*` sandwich.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SandwichConstants {
    /// `c1 = c2 = (2β/d · A^{-2β/d})^{d/(2β+d)}`, the prefactor the
    /// first-order condition carries. Every interior stationary point and the
    /// integer argmin lie inside the resulting interval.
    Derived,
    /// `c1 = c2 = 1`.
    Unit,
    Explicit {
        c1: f64,
        c2: f64,
    },
}

fn foc_prefactor(p: &KObjectiveParams) -> f64 {
    let a_exp = p.scaling.model_exponent();
    (a_exp * p.a.powf(-a_exp)).powf(p.rate())
}

/// Sandwich `lower ≤ k* ≤ upper`, clamped to `[1, M]`.
pub fn k_sandwich_with(p: &KObjectiveParams, constants: SandwichConstants) -> (f64, f64) {
    let (c1, c2) = match constants {
        SandwichConstants::Derived => {
            let c = foc_prefactor(p);
            (c, c)
        }
        SandwichConstants::Unit => (1.0, 1.0),
        SandwichConstants::Explicit { c1, c2 } => (c1, c2),
    };
    let m = p.experts as f64;
    let e = p.rate();
    let lower = c1 * (p.n / (p.a + p.routing_weight() * m.ln())).powf(e);
    let upper = c2 * (p.n / p.a).powf(e);
    (lower.clamp(1.0, m), upper.clamp(1.0, m))
}

pub fn k_sandwich(p: &KObjectiveParams) -> (f64, f64) {
    k_sandwich_with(p, SandwichConstants::Derived)
}

struct IterationRun {
    k: f64,
    raw: f64,
    iterations: usize,
    converged: bool,
    denominator_clamped: bool,
}

fn iterate_from(p: &KObjectiveParams, start: f64, tol: f64, max_iter: usize) -> IterationRun {
    let m = p.experts as f64;
    let a_exp = p.scaling.model_exponent();
    let numerator = a_exp * p.a.powf(-a_exp) * p.n;
    let e = p.rate();
    let floor = p.a * 1e-6;

    let mut clamped_den = false;
    let mut step = |k: f64| {
        let mut den = p.a + p.routing_weight() * (m / k).ln();
        if den < floor {
            den = floor;
            clamped_den = true;
        }
        (numerator / den).powf(e)
    };

    let mut k = start.clamp(1.0, m);
    let mut raw = k;
    let mut last_sign = 0i8;
    let mut flips = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        raw = step(k);
        let mut next = raw.clamp(1.0, m);
        if flips >= 2 {
            next = 0.5 * (k + next);
        }
        let delta = next - k;
        let sign = if delta > 0.0 {
            1
        } else if delta < 0.0 {
            -1
        } else {
            0
        };
        if sign != 0 && last_sign != 0 && sign != last_sign {
            flips += 1;
        }
        if sign != 0 {
            last_sign = sign;
        }
        k = next;
        if delta.abs() < tol {
            converged = true;
            break;
        }
    }
    IterationRun {
        k,
        raw,
        iterations,
        converged,
        denominator_clamped: clamped_den,
    }
}

fn best_integer_near(k: f64, p: &KObjectiveParams) -> (usize, f64) {
    let m = p.experts;
    let lo = (k.floor() as usize).clamp(1, m);
    let hi = (k.ceil() as usize).clamp(1, m);
    let (flo, fhi) = (
        p.unchecked_objective(lo as f64),
        p.unchecked_objective(hi as f64),
    );
    if flo <= fhi {
        (lo, flo)
    } else {
        (hi, fhi)
    }
}

/// Fixed-point solution of the first-order condition for `k*`.
///
/// The iteration starts from the no-routing optimum `(n/A)^{d/(2β+d)}`. The
/// objective can have an interior minimum and a boundary minimum at `k = M`
/// at once, and a monotone iteration only reaches the one whose basin holds
/// its start, so the iteration is also run from both ends of `[1, M]` and the
/// integer with the lowest objective wins.
pub fn optimal_k_fixed_point(p: &KObjectiveParams, tol: f64, max_iter: usize) -> Result<KSolution> {
    p.validate()?;
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tol = {tol} must be positive")));
    }
    let m = p.experts as f64;
    let starts = [(p.n / p.a).powf(p.rate()), 1.0, m];
    let mut best: Option<(usize, f64, IterationRun)> = None;
    for start in starts {
        let run = iterate_from(p, start, tol, max_iter);
        let (k_int, value) = best_integer_near(run.k, p);
        let better = match &best {
            None => true,
            Some((_, v, _)) => value < *v,
        };
        if better {
            best = Some((k_int, value, run));
        }
    }
    let (k_star, _, run) = best.expect("at least one start");
    let (lower, upper) = k_sandwich(p);
    Ok(KSolution {
        k_star,
        k_continuous: run.k,
        iterations: run.iterations,
        lower,
        upper,
        capped: run.raw >= m && run.k >= m,
        converged: run.converged,
        denominator_clamped: run.denominator_clamped,
    })
}

/// Brute-force argmin of the k-objective over integers in `[1, M]`.
pub fn optimal_k_grid(p: &KObjectiveParams) -> Result<usize> {
    p.validate()?;
    if p.experts > 10_000_000 {
        return Err(Error::Domain("grid oracle limited to M <= 1e7".into()));
    }
    let mut best = (1usize, f64::INFINITY);
    for k in 1..=p.experts {
        let v = p.unchecked_objective(k as f64);
        if v < best.1 {
            best = (k, v);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComputeAllocation {
    pub budget: f64,
    pub n_active: f64,
    pub n_samples: f64,
    pub error_at_opt: f64,
}

/// `Φ(N; C) = A N^{-2β/d} + B N² / C`.
pub fn compute_objective(active: f64, budget: f64, a: f64, b: f64, p: &ScalingParams) -> f64 {
    a * active.powf(-p.model_exponent()) + b * active * active / budget
}

fn check_compute_args(budget: f64, a: f64, b: f64, p: &ScalingParams) -> Result<()> {
    p.validate()?;
    for (name, v) in [("C", budget), ("A", a), ("B", b)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} = {v} must be positive")));
        }
    }
    Ok(())
}

/// Closed-form compute-optimal allocation under `C = n · N_act`.
pub fn compute_optimal(
    budget: f64,
    a: f64,
    b: f64,
    p: &ScalingParams,
) -> Result<ComputeAllocation> {
    check_compute_args(budget, a, b, p)?;
    let (beta, d) = (p.beta, p.d);
    let n_active = ((beta / d) * (a / b) * budget).powf(d / (2.0 * beta + 2.0 * d));
    Ok(ComputeAllocation {
        budget,
        n_active,
        n_samples: budget / n_active,
        error_at_opt: compute_objective(n_active, budget, a, b, p),
    })
}

/// Grid-plus-golden-section minimizer of `Φ(·; C)` over `N ∈ [1, C]`.
pub fn compute_optimal_grid(
    budget: f64,
    a: f64,
    b: f64,
    p: &ScalingParams,
    grid_points: usize,
) -> Result<f64> {
    check_compute_args(budget, a, b, p)?;
    if grid_points < 100 {
        return Err(Error::Domain(format!(
            "grid_points = {grid_points} must be at least 100"
        )));
    }
    if budget <= 1.0 {
        return Err(Error::Domain("budget must exceed 1".into()));
    }
    let grid = logspace(1.0, budget, grid_points);
    let phi = |n: f64| compute_objective(n, budget, a, b, p);
    let best = (0..grid.len())
        .min_by(|&i, &j| phi(grid[i]).total_cmp(&phi(grid[j])))
        .expect("non-empty grid");
    let lo = grid[best.saturating_sub(1)].ln();
    let hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let t = golden_section(|t| phi(t.exp()), lo, hi, 200);
    Ok(t.exp())
}

/// Seeded draws for the `k*` oracle sweep.
///
/// `β ~ U[0.5, 3]`, `d ~ U[2, 64]`, `M ~ U{2..1024}`, `n` log-uniform on
/// `[1e3, 1e9]`, `A` log-uniform on `[1e1, 1e4]`, `L_T ~ U{1..8}`,
/// `ℓ ∈ {16, 32, …, 512}`.
pub fn k_sweep_draws(seed: u64, count: usize) -> Vec<KObjectiveParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let beta = rng.random_range(0.5..=3.0);
            let d = rng.random_range(2.0..=64.0);
            let experts = rng.random_range(2..=1024usize);
            let n = 10f64.powf(rng.random_range(3.0..=9.0));
            let a = 10f64.powf(rng.random_range(1.0..=4.0));
            let blocks = rng.random_range(1..=8usize);
            let seq_len = 1usize << rng.random_range(4..=9u32);
            KObjectiveParams {
                a,
                n,
                blocks,
                seq_len,
                experts,
                scaling: ScalingParams { beta, d },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KSweepRow {
    pub params: KObjectiveParams,
    pub fixed_point: KSolution,
    pub grid: usize,
    pub agrees: bool,
    pub fixed_in_sandwich: bool,
    pub grid_in_sandwich: bool,
    pub grid_in_unit_sandwich: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepReport {
    pub rows: Vec<KSweepRow>,
    pub agreement_rate: f64,
    pub fixed_in_sandwich_rate: f64,
    pub grid_in_sandwich_rate: f64,
    pub grid_in_unit_sandwich_rate: f64,
}

fn in_expanded(k: f64, (lo, hi): (f64, f64)) -> bool {
    k >= lo / 2.0 && k <= 2.0 * hi
}

/// Fixed point vs grid oracle over the given draws; rows keep draw order.
pub fn k_oracle_sweep(draws: &[KObjectiveParams]) -> Result<KSweepReport> {
    let rows = draws
        .par_iter()
        .map(|p| -> Result<KSweepRow> {
            let fixed_point = optimal_k_fixed_point(p, 1e-9, 500)?;
            let grid = optimal_k_grid(p)?;
            let sandwich = k_sandwich(p);
            Ok(KSweepRow {
                params: *p,
                fixed_point,
                grid,
                agrees: fixed_point.k_star.abs_diff(grid) <= 1,
                fixed_in_sandwich: in_expanded(fixed_point.k_star as f64, sandwich),
                grid_in_sandwich: in_expanded(grid as f64, sandwich),
                grid_in_unit_sandwich: in_expanded(
                    grid as f64,
                    k_sandwich_with(p, SandwichConstants::Unit),
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let rate = |f: fn(&KSweepRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(KSweepReport {
        agreement_rate: rate(|r| r.agrees),
        fixed_in_sandwich_rate: rate(|r| r.fixed_in_sandwich),
        grid_in_sandwich_rate: rate(|r| r.grid_in_sandwich),
        grid_in_unit_sandwich_rate: rate(|r| r.grid_in_unit_sandwich),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComputeDraw {
    pub budget: f64,
    pub a: f64,
    pub b: f64,
    pub scaling: ScalingParams,
}

/// `C` log-uniform on `[1e6, 1e14]`, `A, B` log-uniform on `[0.1, 10]`,
/// `β ~ U[0.5, 3]`, `d ~ U[2, 64]`.
pub fn compute_sweep_draws(seed: u64, count: usize) -> Vec<ComputeDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| ComputeDraw {
            budget: 10f64.powf(rng.random_range(6.0..=14.0)),
            a: 10f64.powf(rng.random_range(-1.0..=1.0)),
            b: 10f64.powf(rng.random_range(-1.0..=1.0)),
            scaling: ScalingParams {
                beta: rng.random_range(0.5..=3.0),
                d: rng.random_range(2.0..=64.0),
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComputeSweepRow {
    pub draw: ComputeDraw,
    pub closed_form: f64,
    pub grid: f64,
    pub rel_diff: f64,
}

pub fn compute_oracle_sweep(
    draws: &[ComputeDraw],
    grid_points: usize,
) -> Result<Vec<ComputeSweepRow>> {
    draws
        .par_iter()
        .map(|d| {
            let closed = compute_optimal(d.budget, d.a, d.b, &d.scaling)?.n_active;
            let grid = compute_optimal_grid(d.budget, d.a, d.b, &d.scaling, grid_points)?;
            Ok(ComputeSweepRow {
                draw: *d,
                closed_form: closed,
                grid,
                rel_diff: (grid - closed).abs() / closed,
            })
        })
        .collect()
}

/// Slope of `ln error_at_opt` against `ln C` over the given budgets.
pub fn compute_error_slope(budgets: &[f64], a: f64, b: f64, p: &ScalingParams) -> Result<f64> {
    let mut xs = Vec::with_capacity(budgets.len());
    let mut ys = Vec::with_capacity(budgets.len());
    for &c in budgets {
        xs.push(c.ln());
        ys.push(compute_optimal(c, a, b, p)?.error_at_opt.ln());
    }
    ols(&xs, &ys)
        .map(|f| f.slope)
        .ok_or_else(|| Error::Degenerate("need two distinct budgets".into()))
}
