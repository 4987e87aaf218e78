//! Constructive approximation on one-dimensional manifolds: separated
//! covers, a bump partition of unity, local Taylor experts and the
//! resulting k-sparse mixture.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::numeric::{ols, orthonormal_frame};
use crate::{Error, Result};

/// Number of evaluation points used for sup-norm errors.
pub const EVAL_POINTS: usize = 10_000;

/// Errors at or below this are treated as exact zeros by the rate fit.
const ZERO_ERROR: f64 = 1e-12;

const SEP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ManifoldKind {
    Interval {
        a: f64,
        b: f64,
    },
    /// Unit circle parameterized by angle, circumference `2π`.
    Circle,
}

/// A one-dimensional manifold embedded in `R^D` by a fixed orthonormal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    pub kind: ManifoldKind,
    frame: Vec<Vec<f64>>,
}

impl Manifold {
    pub fn new(kind: ManifoldKind, ambient_dim: usize, seed: u64) -> Result<Self> {
        let need = match kind {
            ManifoldKind::Interval { a, b } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(Error::InvalidConfig(format!(
                        "interval [{a}, {b}] is empty"
                    )));
                }
                1
            }
            ManifoldKind::Circle => 2,
        };
        if ambient_dim < need {
            return Err(Error::InvalidConfig(format!(
                "ambient dimension {ambient_dim} is below {need}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            kind,
            frame: orthonormal_frame(&mut rng, ambient_dim, need),
        })
    }

    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::new(ManifoldKind::Interval { a, b }, 1, 0)
    }

    pub fn circle() -> Result<Self> {
        Self::new(ManifoldKind::Circle, 2, 0)
    }

    pub fn ambient_dim(&self) -> usize {
        self.frame[0].len()
    }

    /// Length of the parameter domain.
    pub fn extent(&self) -> f64 {
        match self.kind {
            ManifoldKind::Interval { a, b } => b - a,
            ManifoldKind::Circle => TAU,
        }
    }

    fn origin(&self) -> f64 {
        match self.kind {
            ManifoldKind::Interval { a, .. } => a,
            ManifoldKind::Circle => 0.0,
        }
    }

    /// Signed intrinsic displacement `x - c`, wrapped to `(-π, π]` on the circle.
    pub fn displacement(&self, c: f64, x: f64) -> f64 {
        let d = x - c;
        match self.kind {
            ManifoldKind::Interval { .. } => d,
            ManifoldKind::Circle => {
                let w = d.rem_euclid(TAU);
                if w > TAU / 2.0 {
                    w - TAU
                } else {
                    w
                }
            }
        }
    }

    pub fn distance(&self, c: f64, x: f64) -> f64 {
        self.displacement(c, x).abs()
    }

    /// Point in `R^D` for an intrinsic coordinate.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        match self.kind {
            ManifoldKind::Interval { .. } => self.frame[0].iter().map(|q| t * q).collect(),
            ManifoldKind::Circle => {
                let (s, c) = t.sin_cos();
                self.frame[0]
                    .iter()
                    .zip(&self.frame[1])
                    .map(|(a, b)| c * a + s * b)
                    .collect()
            }
        }
    }

    /// `count` evenly spaced coordinates; interval endpoints are included,
    /// the circle grid does not repeat `2π`.
    pub fn grid(&self, count: usize) -> Vec<f64> {
        match self.kind {
            ManifoldKind::Interval { a, b } => (0..count)
                .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
                .collect(),
            ManifoldKind::Circle => (0..count).map(|i| TAU * i as f64 / count as f64).collect(),
        }
    }
}

/// Bump profile: 1 on `[0, 1/2]`, 0 on `[1, ∞)`, a quintic smoothstep between.
pub fn bump(t: f64) -> f64 {
    if t <= 0.5 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        let s = 2.0 * t - 1.0;
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cover {
    pub centers: Vec<f64>,
    pub rho: f64,
    /// Largest number of open radius-`rho` balls sharing a point.
    pub overlap: usize,
}

impl Cover {
    /// Greedy maximal `rho/2`-separated set, swept from the origin of the
    /// parameterization.
    pub fn greedy(manifold: &Manifold, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < manifold.extent()) {
            return Err(Error::InvalidConfig(format!(
                "radius {rho} must be positive and below the manifold extent {}",
                manifold.extent()
            )));
        }
        let step = rho / 2.0;
        let origin = manifold.origin();
        // last admissible coordinate: the interval end, or the point still
        // `rho/2` away from the origin going around the circle
        let last = match manifold.kind {
            ManifoldKind::Interval { b, .. } => b,
            ManifoldKind::Circle => TAU - step,
        };
        let count = ((last - origin) / step).floor() as usize + 1;
        let centers = (0..count)
            .map(|j| origin + j as f64 * step)
            .filter(|&c| c <= last)
            .collect();
        Self::from_centers(manifold, centers, rho)
    }

    /// Validates separation and cover, and computes the overlap bound.
    pub fn from_centers(manifold: &Manifold, mut centers: Vec<f64>, rho: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidConfig(
                "cover needs at least one center".into(),
            ));
        }
        centers.sort_by(f64::total_cmp);
        let slack = SEP_TOL * manifold.extent();
        let mut gaps: Vec<f64> = centers.windows(2).map(|w| w[1] - w[0]).collect();
        match manifold.kind {
            ManifoldKind::Interval { a, b } => {
                if centers[0] < a || *centers.last().unwrap() > b {
                    return Err(Error::Domain("cover center outside the interval".into()));
                }
                if centers[0] - a > rho / 2.0 + slack
                    || b - centers.last().unwrap() > rho / 2.0 + slack
                {
                    return Err(Error::Degenerate("interval ends are not covered".into()));
                }
            }
            ManifoldKind::Circle => {
                if centers.len() > 1 {
                    gaps.push(centers[0] + TAU - centers.last().unwrap());
                }
            }
        }
        if gaps.iter().any(|&g| g < rho / 2.0 - slack) {
            return Err(Error::Degenerate("centers are not rho/2-separated".into()));
        }
        // every point within rho/2 of a center keeps the normalizer >= 1
        if gaps.iter().any(|&g| g > rho + slack) {
            return Err(Error::Degenerate("cover leaves a gap".into()));
        }
        let overlap = overlap_bound(manifold, &centers, rho);
        Ok(Self {
            centers,
            rho,
            overlap,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Greedy cover with as close to `m` centers as bisection on `rho` allows.
    pub fn with_count(manifold: &Manifold, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 charts, got {m}"
            )));
        }
        let count = |rho: f64| Cover::greedy(manifold, rho).map(|c| c.len()).unwrap_or(0);
        // smallest radius whose greedy cover has at most m centers: for a
        // fixed chart budget the local error shrinks with the radius
        let mut lo = manifold.extent() / (4 * m) as f64;
        let mut hi = manifold.extent() * (1.0 - 1e-12);
        if count(lo) <= m {
            return Err(Error::InvalidConfig(format!("{m} charts is too few")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if count(mid) <= m {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let cover = Cover::greedy(manifold, hi)?;
        if cover.len().abs_diff(m) > 1 {
            return Err(Error::Degenerate(format!(
                "bisection produced {} centers for a target of {m}",
                cover.len()
            )));
        }
        Ok(cover)
    }
}

fn overlap_bound(manifold: &Manifold, centers: &[f64], rho: f64) -> usize {
    // max number of centers in an open window of length 2·rho
    let mut line: Vec<f64> = centers.to_vec();
    if manifold.kind == ManifoldKind::Circle {
        line.extend(centers.iter().map(|c| c + TAU));
    }
    let best = (0..centers.len())
        .map(|i| {
            line[i..]
                .iter()
                .take_while(|&&c| c - line[i] < 2.0 * rho * (1.0 - 1e-9))
                .count()
        })
        .max()
        .unwrap_or(0);
    best.min(centers.len())
}

/// Partition of unity `φ_ν = ψ_ν / Σ ψ` with `ψ_ν(x) = η(dist(x, c_ν)/ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOfUnity {
    pub manifold: Manifold,
    pub cover: Cover,
}

impl PartitionOfUnity {
    pub fn new(manifold: Manifold, cover: Cover) -> Self {
        Self { manifold, cover }
    }

    /// Nonzero weights at `x` as `(chart, weight)`, ordered by chart.
    pub fn weights(&self, x: f64) -> Vec<(usize, f64)> {
        let mut psi: Vec<(usize, f64)> = self
            .cover
            .centers
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| {
                let v = bump(self.manifold.distance(c, x) / self.cover.rho);
                (v > 0.0).then_some((i, v))
            })
            .collect();
        let s: f64 = psi.iter().map(|p| p.1).sum();
        assert!(s >= 1.0 - 1e-12, "partition normalizer {s} below 1 at {x}");
        psi.iter_mut().for_each(|p| p.1 /= s);
        psi
    }

    /// Weight of one chart at `x`.
    pub fn weight(&self, chart: usize, x: f64) -> f64 {
        self.weights(x)
            .iter()
            .find(|p| p.0 == chart)
            .map_or(0.0, |p| p.1)
    }

    /// Largest central-difference slope of any `φ_ν` over `points` grid points.
    pub fn max_gradient(&self, points: usize) -> f64 {
        let h = self.cover.rho * 1e-5;
        self.manifold
            .grid(points)
            .par_iter()
            .map(|&x| {
                (0..self.cover.len())
                    .map(|nu| (self.weight(nu, x + h) - self.weight(nu, x - h)).abs() / (2.0 * h))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// Largest `k` weights (ties to the lower chart) rescaled to sum to one.
pub fn top_k(weights: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut w = weights.to_vec();
    w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    w.truncate(k);
    let s: f64 = w.iter().map(|p| p.1).sum();
    w.iter_mut().for_each(|p| p.1 /= s);
    w.sort_by_key(|p| p.0);
    w
}

/// Targets with closed-form derivatives of every order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Target {
    Constant(f64),
    /// `slope·t + offset`
    Linear {
        slope: f64,
        offset: f64,
    },
    /// `sin(freq·t)`
    Sine {
        freq: f64,
    },
    /// `t²`
    Square,
    /// `e^t`
    Exp,
}

impl Target {
    pub fn value(&self, t: f64) -> f64 {
        self.derivative(t, 0)
    }

    /// `n`-th derivative at `t`.
    pub fn derivative(&self, t: f64, n: usize) -> f64 {
        match *self {
            Target::Constant(c) => {
                if n == 0 {
                    c
                } else {
                    0.0
                }
            }
            Target::Linear { slope, offset } => match n {
                0 => slope * t + offset,
                1 => slope,
                _ => 0.0,
            },
            Target::Sine { freq } => {
                let scale = freq.powi(n as i32);
                let phase = freq * t;
                scale
                    * match n % 4 {
                        0 => phase.sin(),
                        1 => phase.cos(),
                        2 => -phase.sin(),
                        _ => -phase.cos(),
                    }
            }
            Target::Square => match n {
                0 => t * t,
                1 => 2.0 * t,
                2 => 2.0,
                _ => 0.0,
            },
            Target::Exp => t.exp(),
        }
    }
}

/// Polynomial degree for smoothness `beta`: the largest integer below `beta`.
pub fn taylor_degree(beta: f64) -> usize {
    (beta.ceil() - 1.0).max(0.0) as usize
}

/// Taylor polynomial of the target in the chart coordinate `z = x - center`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalExpert {
    pub chart: usize,
    pub center: f64,
    pub coeffs: Vec<f64>,
}

impl LocalExpert {
    pub fn eval(&self, z: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }
}

pub fn taylor_expert(f: &Target, chart: usize, center: f64, degree: usize) -> LocalExpert {
    let mut factorial = 1.0;
    let coeffs = (0..=degree)
        .map(|i| {
            if i > 0 {
                factorial *= i as f64;
            }
            f.derivative(center, i) / factorial
        })
        .collect();
    LocalExpert {
        chart,
        center,
        coeffs,
    }
}

/// Sup of `|f - P|` over the chart ball, sampled at `points` locations.
pub fn taylor_remainder(f: &Target, center: f64, rho: f64, degree: usize, points: usize) -> f64 {
    let p = taylor_expert(f, 0, center, degree);
    (0..points)
        .map(|i| {
            let z = -rho + 2.0 * rho * i as f64 / (points - 1) as f64;
            (f.value(center + z) - p.eval(z)).abs()
        })
        .fold(0.0, f64::max)
}

/// Sparse mixture `T(x) = Σ w_ν(x)·E_ν(x)` over the top-k partition weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionA {
    pub pou: PartitionOfUnity,
    pub experts: Vec<LocalExpert>,
    pub k: usize,
    pub sup_error: f64,
}

impl ConstructionA {
    pub fn eval(&self, x: f64) -> f64 {
        let m = &self.pou.manifold;
        top_k(&self.pou.weights(x), self.k)
            .iter()
            .map(|&(nu, w)| w * self.experts[nu].eval(m.displacement(self.experts[nu].center, x)))
            .sum()
    }

    pub fn rho(&self) -> f64 {
        self.pou.cover.rho
    }
}

fn sup_error_on_grid<F: Fn(f64) -> f64 + Sync>(manifold: &Manifold, f: &Target, approx: F) -> f64 {
    manifold
        .grid(EVAL_POINTS)
        .par_iter()
        .map(|&x| (approx(x) - f.value(x)).abs())
        .reduce(|| 0.0, f64::max)
}

/// Builds the mixture on a cover of about `charts` centers with experts of
/// degree [`taylor_degree`]`(beta)`.
pub fn construction_a(
    f: &Target,
    manifold: &Manifold,
    charts: usize,
    k: usize,
    beta: f64,
) -> Result<ConstructionA> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta = {beta} must be positive"
        )));
    }
    let cover = Cover::with_count(manifold, charts)?;
    if k < cover.overlap {
        return Err(Error::InfeasibleSparsity {
            k,
            overlap: cover.overlap,
        });
    }
    let degree = taylor_degree(beta);
    let experts = cover
        .centers
        .iter()
        .enumerate()
        .map(|(nu, &c)| taylor_expert(f, nu, c, degree))
        .collect();
    let mut built = ConstructionA {
        pou: PartitionOfUnity::new(manifold.clone(), cover),
        experts,
        k,
        sup_error: 0.0,
    };
    built.sup_error = sup_error_on_grid(manifold, f, |x| built.eval(x));
    Ok(built)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateRow {
    #[serde(rename = "M")]
    pub charts: usize,
    pub rho: f64,
    pub sup_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// OLS slope of `ln sup_error` on `ln M` over nonzero errors.
    pub slope: Option<f64>,
    /// Set when some errors were exactly representable as zero.
    pub degenerate: bool,
}

/// Runs [`construction_a`] for each chart count, using `k = None` to mean
/// the smallest feasible sparsity (the cover overlap).
pub fn rate_experiment(
    f: &Target,
    manifold: &Manifold,
    beta: f64,
    charts: &[usize],
    k: Option<usize>,
) -> Result<RateReport> {
    if charts.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: charts.len(),
        });
    }
    if charts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("chart counts must increase".into()));
    }
    let rows = charts
        .par_iter()
        .map(|&m| {
            let k = match k {
                Some(k) => k,
                None => Cover::with_count(manifold, m)?.overlap,
            };
            let built = construction_a(f, manifold, m, k, beta)?;
            Ok(RateRow {
                charts: m,
                rho: built.rho(),
                sup_error: built.sup_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.sup_error > ZERO_ERROR)
        .map(|r| ((r.charts as f64).ln(), r.sup_error.ln()))
        .unzip();
    let degenerate = x.len() < rows.len();
    let slope = ols(&x, &y).map(|fit| fit.slope);
    Ok(RateReport {
        rows,
        slope,
        degenerate,
    })
}

/// Single global Taylor expert at the interval midpoint, for `k = 1`.
pub fn global_expert_error(f: &Target, manifold: &Manifold, degree: usize) -> Result<f64> {
    let ManifoldKind::Interval { a, b } = manifold.kind else {
        return Err(Error::InvalidConfig(
            "global expert needs an interval".into(),
        ));
    };
    let mid = 0.5 * (a + b);
    let p = taylor_expert(f, 0, mid, degree);
    Ok(sup_error_on_grid(manifold, f, |x| p.eval(x - mid)))
}
