use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::MoEModel;
use crate::accounting::ArchConfig;
use crate::{Error, Result};

/// Scalar readout: mean over tokens, then the all-ones form scaled by `1/d_emb`.
pub fn readout(h: &[Vec<f64>]) -> f64 {
    let d = h[0].len() as f64;
    let pooled: f64 = h.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / h.len() as f64;
    pooled / d
}

/// `L_in^{L_T} · (ℓ·m·d_emb² + (1+k)·d_emb·w^{L_FFN}) · κ`.
pub fn lparam_formula(cfg: &ArchConfig, l_in: f64) -> Result<f64> {
    if !(l_in >= 1.0 && l_in.is_finite()) {
        return Err(Error::Domain(format!("L_in = {l_in} must be at least 1")));
    }
    let d = cfg.emb_dim as f64;
    let w = cfg.ffn_width as f64;
    let arch = cfg.seq_len as f64 * cfg.heads as f64 * d * d
        + (1.0 + cfg.k as f64) * d * w.powi(cfg.ffn_depth as i32);
    Ok(l_in.powi(cfg.blocks as i32) * arch * cfg.weight_bound)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRow {
    pub eta: f64,
    pub max_delta: f64,
    /// `max_delta / eta`, zero when `eta = 0`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    /// Accepted perturbation directions.
    pub trials: usize,
    /// Directions rejected because the realized pattern changed.
    pub redraws: usize,
    /// Set when more than half of all draws were rejected.
    pub flagged: bool,
    /// Per accepted trial, `|ΔT|` for each eta (same order as `rows`).
    pub per_trial: Vec<Vec<f64>>,
}

impl StabilityReport {
    /// Largest over smallest ratio across the positive etas.
    pub fn ratio_spread(&self) -> f64 {
        let r: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.eta > 0.0)
            .map(|r| r.ratio)
            .collect();
        let hi = r.iter().cloned().fold(0.0, f64::max);
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        hi / lo
    }
}

fn perturbed(model: &MoEModel, dir: &[f64], eta: f64) -> MoEModel {
    let kappa = model.cfg.weight_bound;
    let mut out = model.clone();
    let mut it = dir.iter();
    for t in out.tensors_mut().into_iter().filter(|t| !t.router) {
        for v in t.data.iter_mut() {
            *v = (*v + eta * it.next().unwrap()).clamp(-kappa, kappa);
        }
    }
    out
}

fn free_params(model: &MoEModel) -> usize {
    model
        .clone()
        .tensors_mut()
        .iter()
        .filter(|t| !t.router)
        .map(|t| t.data.len())
        .sum()
}

/// Perturbs every non-router parameter by `eta·u` with `u` uniform in
/// `[-1, 1]^p` (one direction per trial, shared across etas) and records the
/// readout change. Directions that change the realized routing are redrawn.
pub fn perturb_stability(
    model: &MoEModel,
    h0: &[Vec<f64>],
    etas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if etas.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::Domain("eta values must be nonnegative".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("need at least one trial".into()));
    }
    let base = model.forward(h0)?;
    let t0 = readout(&base.h_out);
    let p = free_params(model);
    // each trial gets its own stream; a trial gives up after this many draws
    let max_draws = 16;
    let results: Vec<(Option<Vec<f64>>, usize)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let mut rejected = 0;
            while rejected < max_draws {
                let dir: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let mut deltas = Vec::with_capacity(etas.len());
                let mut same = true;
                for &eta in etas {
                    let tr = perturbed(model, &dir, eta).forward(h0)?;
                    if tr.pattern != base.pattern {
                        same = false;
                        break;
                    }
                    deltas.push((readout(&tr.h_out) - t0).abs());
                }
                if same {
                    return Ok((Some(deltas), rejected));
                }
                rejected += 1;
            }
            Ok((None, rejected))
        })
        .collect::<Result<_>>()?;
    let redraws: usize = results.iter().map(|r| r.1).sum();
    let per_trial: Vec<Vec<f64>> = results.into_iter().filter_map(|r| r.0).collect();
    let draws = redraws + per_trial.len();
    let rows = etas
        .iter()
        .enumerate()
        .map(|(i, &eta)| {
            let max_delta = per_trial.iter().map(|d| d[i]).fold(0.0, f64::max);
            StabilityRow {
                eta,
                max_delta,
                ratio: if eta > 0.0 { max_delta / eta } else { 0.0 },
            }
        })
        .collect();
    Ok(StabilityReport {
        rows,
        trials: per_trial.len(),
        redraws,
        flagged: 2 * redraws > draws,
        per_trial,
    })
}

/// Empirical lower bound on the block input-Lipschitz constant: largest
/// `‖B(H+δ) - B(H)‖_∞ / ‖δ‖_∞` over blocks and seeded `δ` of size `eps`,
/// with each block's routing held at the unperturbed selection.
pub fn estimate_input_lipschitz(
    model: &MoEModel,
    h0: &[Vec<f64>],
    trials: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    model.check_input(h0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = h0.to_vec();
    let mut best = 0.0f64;
    for bi in 0..model.blocks.len() {
        let mut out = h.clone();
        let (sets, _) = model.block_step(bi, &mut out, None)?;
        for _ in 0..trials {
            let mut hp = h.clone();
            let mut norm = 0.0f64;
            for v in hp.iter_mut().flatten() {
                let d = eps * rng.random_range(-1.0..=1.0);
                norm = norm.max(d.abs());
                *v += d;
            }
            if norm == 0.0 {
                continue;
            }
            model.block_step(bi, &mut hp, Some(&sets))?;
            let diff = hp
                .iter()
                .flatten()
                .zip(out.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            best = best.max(diff / norm);
        }
        h = out;
    }
    Ok(best)
}
