//! Power-law fits with an irreducible loss floor, plus the exponent
//! identities and per-expert tables built on top of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numeric::{golden_section, logspace, ols};
use crate::{Error, Result};

const MIN_POINTS: usize = 4;
const FLOOR_GRID: usize = 200;
const FLOOR_MARGIN: f64 = 1e-10;

/// A loss curve `(x, loss)` with `x` strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    points: Vec<(f64, f64)>,
}

impl LossCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::InsufficientData {
                needed: MIN_POINTS,
                got: points.len(),
            });
        }
        for (i, &(x, l)) in points.iter().enumerate() {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::Domain(format!("x[{i}] = {x} must be positive")));
            }
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Domain(format!("loss[{i}] = {l} must be positive")));
            }
            if i > 0 && x <= points[i - 1].0 {
                return Err(Error::Domain(format!(
                    "x must be strictly increasing at index {i}"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn min_loss(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloorMode {
    Fixed(f64),
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitResult {
    pub exponent: f64,
    pub floor: f64,
    pub log_prefactor: f64,
    pub r_squared: f64,
    pub n_points: usize,
    /// Residual sum of squares of the log-space regression.
    pub rss: f64,
}

fn fit_with_floor(curve: &LossCurve, c: f64) -> Option<FitResult> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = curve
        .points
        .iter()
        .map(|&(x, l)| (x.ln(), (l - c).ln()))
        .unzip();
    if ly.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let fit = ols(&lx, &ly)?;
    Some(FitResult {
        exponent: -fit.slope,
        floor: c,
        log_prefactor: fit.intercept,
        r_squared: fit.r_squared,
        n_points: curve.len(),
        rss: fit.rss,
    })
}

fn profile_rss(curve: &LossCurve, c: f64) -> f64 {
    fit_with_floor(curve, c).map_or(f64::INFINITY, |f| f.rss)
}

/// Fits `L = exp(b)·x^(-alpha) + c` by OLS of `ln(L - c)` on `ln x`.
///
/// In search mode the floor is picked from 200 candidates in
/// `[0, min_loss·(1 - 1e-10)]`, spaced so the gap to `min_loss` is
/// log-uniform, then refined by golden section between grid neighbors.
pub fn fit_power_law(curve: &LossCurve, mode: FloorMode) -> Result<FitResult> {
    let min_loss = curve.min_loss();
    match mode {
        FloorMode::Fixed(c) => {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Domain(format!("floor {c} must be nonnegative")));
            }
            if c >= min_loss {
                return Err(Error::Domain(format!(
                    "floor {c} is not below the minimum loss {min_loss}"
                )));
            }
            fit_with_floor(curve, c)
                .ok_or_else(|| Error::Degenerate("log-space regression failed".into()))
        }
        FloorMode::Search => {
            let max_loss = curve.points.iter().map(|p| p.1).fold(0.0, f64::max);
            if max_loss - min_loss <= f64::EPSILON * max_loss {
                return Err(Error::Degenerate("floor absorbs all variation".into()));
            }
            let gaps = logspace(min_loss, min_loss * FLOOR_MARGIN, FLOOR_GRID);
            let grid: Vec<f64> = gaps
                .iter()
                .enumerate()
                .map(|(i, g)| if i == 0 { 0.0 } else { min_loss - g })
                .collect();
            let rss: Vec<f64> = grid.iter().map(|&c| profile_rss(curve, c)).collect();
            let best = (0..grid.len())
                .min_by(|&a, &b| rss[a].total_cmp(&rss[b]))
                .expect("grid is non-empty");
            let lo = grid[best.saturating_sub(1)];
            let hi = grid[(best + 1).min(grid.len() - 1)];
            let refined = golden_section(|c| profile_rss(curve, c), lo, hi, 200);
            let c = if profile_rss(curve, refined) <= rss[best] {
                refined
            } else {
                grid[best]
            };
            fit_with_floor(curve, c)
                .ok_or_else(|| Error::Degenerate("floor absorbs all variation".into()))
        }
    }
}

/// Predicted data exponent and its residuals from a model exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub pred_d: f64,
    pub r_d: f64,
    pub rel_err_d: f64,
}

pub fn consistency_check(alpha_n: f64, alpha_d: f64) -> Consistency {
    let pred_d = alpha_n / (1.0 + alpha_n);
    let r_d = alpha_d - pred_d;
    Consistency {
        pred_d,
        r_d,
        rel_err_d: r_d / pred_d,
    }
}

/// Compute exponent `alpha_N·alpha_D / (alpha_N + alpha_D)`.
pub fn compute_exponent(alpha_n: f64, alpha_d: f64) -> f64 {
    alpha_n * alpha_d / (alpha_n + alpha_d)
}

/// One `(E, mu, nu)` input row.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
pub struct ExpertExponents {
    #[serde(rename = "E")]
    pub experts: u32,
    pub mu: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerExpertRow {
    #[serde(rename = "E")]
    pub experts: u32,
    pub mu: f64,
    pub nu: f64,
    pub alpha_n: f64,
    pub alpha_d: f64,
    pub alpha_c: f64,
    pub alpha_d_pred: f64,
    pub alpha_c_pred: f64,
    pub r_d: f64,
    pub r_c: f64,
    pub rel_err_d: f64,
    pub rel_err_c: f64,
}

impl PerExpertRow {
    pub fn from_exponents(row: ExpertExponents) -> Result<Self> {
        if !(row.mu < 0.0 && row.nu < 0.0) {
            return Err(Error::Domain(format!(
                "E = {}: mu and nu must be negative (got {}, {})",
                row.experts, row.mu, row.nu
            )));
        }
        if row.experts == 0 {
            return Err(Error::Domain("E must be positive".into()));
        }
        let alpha_n = -row.mu;
        let alpha_d = -row.nu;
        let alpha_c = compute_exponent(alpha_n, alpha_d);
        let alpha_d_pred = alpha_n / (1.0 + alpha_n);
        let alpha_c_pred = alpha_n / (2.0 + alpha_n);
        let r_d = alpha_d - alpha_d_pred;
        let r_c = alpha_c - alpha_c_pred;
        Ok(Self {
            experts: row.experts,
            mu: row.mu,
            nu: row.nu,
            alpha_n,
            alpha_d,
            alpha_c,
            alpha_d_pred,
            alpha_c_pred,
            r_d,
            r_c,
            rel_err_d: r_d / alpha_d_pred,
            rel_err_c: r_c / alpha_c_pred,
        })
    }
}

/// Error summary across per-expert rows. MAPE values are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub mae_r_d: f64,
    pub mae_r_c: f64,
    pub mape_r_d: f64,
    pub mape_r_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerExpertTable {
    pub rows: Vec<PerExpertRow>,
    pub summary: ResidualSummary,
}

pub fn per_expert_table(rows: &[ExpertExponents]) -> Result<PerExpertTable> {
    if rows.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let rows = rows
        .iter()
        .map(|&r| PerExpertRow::from_exponents(r))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&PerExpertRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = ResidualSummary {
        mae_r_d: mean(&|r| r.r_d.abs()),
        mae_r_c: mean(&|r| r.r_c.abs()),
        mape_r_d: 100.0 * mean(&|r| r.rel_err_d.abs()),
        mape_r_c: 100.0 * mean(&|r| r.rel_err_c.abs()),
    };
    Ok(PerExpertTable { rows, summary })
}

/// Amplification multipliers `alpha_D / alpha_D_pred`, one per row.
pub fn kappa_from_rows(rows: &[PerExpertRow]) -> Vec<(u32, f64)> {
    rows.iter()
        .map(|r| (r.experts, r.alpha_d / r.alpha_d_pred))
        .collect()
}

/// Log-linear fit `kappa(E) = a + b·ln E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmplificationFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

impl AmplificationFit {
    pub fn predict(&self, experts: f64) -> f64 {
        self.a + self.b * experts.ln()
    }
}

pub fn amplification_fit(rows: &[(u32, f64)]) -> Result<AmplificationFit> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: rows.len(),
        });
    }
    if let Some(&(e, _)) = rows.iter().find(|r| r.0 == 0) {
        return Err(Error::Domain(format!("E = {e} must be positive")));
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.0 as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let fit = ols(&x, &y)
        .ok_or_else(|| Error::Degenerate("rank deficient: all E values are equal".into()))?;
    Ok(AmplificationFit {
        a: fit.intercept,
        b: fit.slope,
        r_squared: fit.r_squared,
    })
}

/// Synthetic curve generator for Monte-Carlo checks of the fitter.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCurve {
    pub exponent: f64,
    pub prefactor: f64,
    pub floor: f64,
    pub xs: Vec<f64>,
    /// Standard deviation of the log-normal multiplicative noise.
    pub noise: f64,
}

impl PlantedCurve {
    pub fn sample(&self, seed: u64) -> Result<LossCurve> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = self
            .xs
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let clean = self.prefactor * x.powf(-self.exponent) + self.floor;
                (x, clean * (self.noise * z).exp())
            })
            .collect();
        LossCurve::new(pts)
    }
}

/// Fitted exponents over `seeds`, in seed order.
pub fn noise_sweep(planted: &PlantedCurve, seeds: &[u64], mode: FloorMode) -> Result<Vec<f64>> {
    seeds
        .par_iter()
        .map(|&s| fit_power_law(&planted.sample(s)?, mode).map(|f| f.exponent))
        .collect()
}
