//! Inference-only MoE transformer with hard top-k routing.
//!
//! Each block is pre-norm: `H + MHA(LN(H))`, then per token
//! `h + Σ_{e ∈ top-k} g_e · E_e(LN(h))` with gates a softmax over the
//! selected router logits.

mod serialize;
mod softmax;
mod stability;

pub use serialize::{read_model, write_model, FORMAT_VERSION};
pub use softmax::{row_softmax_lip_check, softmax_lip_check, softmax_tau, LipReport};
pub use stability::{
    estimate_input_lipschitz, lparam_formula, perturb_stability, readout, StabilityReport,
    StabilityRow,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::{ArchConfig, RoutingPattern};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNorm {
    fn zeros(d: usize) -> Self {
        Self {
            scale: vec![0.0; d],
            shift: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.scale.iter().zip(&self.shift))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

/// Query, key and value projections of one head, each `d_emb × d_h` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub heads: Vec<Head>,
    /// Output projection, `d_emb × d_emb` row-major, applied as `concat · W_O`.
    pub wo: Vec<f64>,
    pub ln_moe: LayerNorm,
    /// Router, `M × d_emb` row-major.
    pub router: Vec<f64>,
    /// `experts[e]` holds `L_FFN` affine layers with ReLU between them.
    pub experts: Vec<Vec<Affine>>,
}

/// Per-token 1-based expert sets and their gates for one block.
pub(crate) type BlockRouting = (Vec<Vec<usize>>, Vec<Vec<f64>>);

/// A parameter tensor in serialization order.
pub(crate) struct Tensor<'a> {
    pub router: bool,
    pub data: &'a mut Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub cfg: ArchConfig,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `ℓ × d_emb` output hidden states.
    pub h_out: Vec<Vec<f64>>,
    pub pattern: RoutingPattern,
    /// `gates[block][token]`, aligned with the pattern's expert sets.
    pub gates: Vec<Vec<Vec<f64>>>,
}

// row-major (rows × cols) times vector from the left: x · W
fn left_mul(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        out.iter_mut().zip(row).for_each(|(o, r)| *o += xi * r);
    }
    out
}

/// Indices of the `k` largest values, ties to the lower index, ascending.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

impl MoEModel {
    /// All-zero parameters with shapes from `cfg`.
    pub fn zeros(cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.emb_dim;
        let dh = cfg.head_dim();
        let w = cfg.ffn_width;
        let expert = || {
            let mut layers = vec![Affine::zeros(d, w)];
            layers.extend((0..cfg.ffn_depth - 2).map(|_| Affine::zeros(w, w)));
            layers.push(Affine::zeros(w, d));
            layers
        };
        let block = || Block {
            ln_attn: LayerNorm::zeros(d),
            heads: (0..cfg.heads)
                .map(|_| Head {
                    wq: vec![0.0; d * dh],
                    wk: vec![0.0; d * dh],
                    wv: vec![0.0; d * dh],
                })
                .collect(),
            wo: vec![0.0; d * d],
            ln_moe: LayerNorm::zeros(d),
            router: vec![0.0; cfg.experts * d],
            experts: (0..cfg.experts).map(|_| expert()).collect(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            blocks: (0..cfg.blocks).map(|_| block()).collect(),
        })
    }

    /// Seeded random model. Matrix entries are uniform in `±min(κ, fan_in^{-1/2})`,
    /// LayerNorm scales are `min(1, κ)` and shifts zero. All values are
    /// exactly representable as `f32`.
    pub fn random(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kappa = cfg.weight_bound;
        let d = cfg.emb_dim;
        let fill = |v: &mut Vec<f64>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let s = kappa.min(1.0 / (fan_in as f64).sqrt()) as f32;
            v.iter_mut()
                .for_each(|x| *x = rng.random_range(-s..=s) as f64);
        };
        for b in &mut model.blocks {
            let g = kappa.min(1.0) as f32 as f64;
            b.ln_attn.scale.fill(g);
            b.ln_moe.scale.fill(g);
            for h in &mut b.heads {
                fill(&mut h.wq, d, &mut rng);
                fill(&mut h.wk, d, &mut rng);
                fill(&mut h.wv, d, &mut rng);
            }
            fill(&mut b.wo, d, &mut rng);
            fill(&mut b.router, d, &mut rng);
            for e in &mut b.experts {
                for layer in e.iter_mut() {
                    let fan_in = layer.inputs;
                    fill(&mut layer.weight, fan_in, &mut rng);
                    fill(&mut layer.bias, fan_in, &mut rng);
                }
            }
        }
        Ok(model)
    }

    /// Every parameter tensor in the documented serialization order.
    pub(crate) fn tensors_mut(&mut self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        let t = |router, data| Tensor { router, data };
        for b in &mut self.blocks {
            out.push(t(false, &mut b.ln_attn.scale));
            out.push(t(false, &mut b.ln_attn.shift));
            for h in &mut b.heads {
                out.push(t(false, &mut h.wq));
                out.push(t(false, &mut h.wk));
                out.push(t(false, &mut h.wv));
            }
            out.push(t(false, &mut b.wo));
            out.push(t(false, &mut b.ln_moe.scale));
            out.push(t(false, &mut b.ln_moe.shift));
            out.push(t(true, &mut b.router));
            for e in &mut b.experts {
                for layer in e.iter_mut() {
                    out.push(t(false, &mut layer.weight));
                    out.push(t(false, &mut layer.bias));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.clone()
            .tensors_mut()
            .iter()
            .map(|t| t.data.len())
            .sum()
    }

    /// Largest absolute parameter entry.
    pub fn max_abs_param(&self) -> f64 {
        self.clone()
            .tensors_mut()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn attention(&self, b: &Block, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let ell = x.len();
        let mut concat = vec![Vec::with_capacity(self.cfg.emb_dim); ell];
        for h in &b.heads {
            let q: Vec<Vec<f64>> = x.iter().map(|r| left_mul(r, &h.wq, dh)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|r| left_mul(r, &h.wk, dh)).collect();
            let v: Vec<Vec<f64>> = x.iter().map(|r| left_mul(r, &h.wv, dh)).collect();
            for t in 0..ell {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kr| q[t].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let a = softmax_tau(&scores, 1.0);
                let mut out = vec![0.0; dh];
                for (s, vr) in a.iter().zip(&v) {
                    out.iter_mut().zip(vr).for_each(|(o, val)| *o += s * val);
                }
                concat[t].extend(out);
            }
        }
        concat
            .iter()
            .map(|c| left_mul(c, &b.wo, self.cfg.emb_dim))
            .collect()
    }

    fn expert(layers: &[Affine], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            h = layer.apply(&h);
            if i + 1 < layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// Applies block `bi` in place; `route` overrides the router's
    /// selection when given. Returns the 1-based expert sets and gates.
    pub(crate) fn block_step(
        &self,
        bi: usize,
        h: &mut [Vec<f64>],
        route: Option<&[Vec<usize>]>,
    ) -> Result<BlockRouting> {
        let cfg = &self.cfg;
        let b = &self.blocks[bi];
        let normed: Vec<Vec<f64>> = h.iter().map(|r| b.ln_attn.apply(r)).collect();
        let att = self.attention(b, &normed);
        for (r, a) in h.iter_mut().zip(&att) {
            r.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
        let mut sets = Vec::with_capacity(cfg.seq_len);
        let mut gates = Vec::with_capacity(cfg.seq_len);
        for (ti, row) in h.iter_mut().enumerate() {
            let z = b.ln_moe.apply(row);
            let logits = left_mul_rows(&b.router, &z, cfg.experts);
            let chosen: Vec<usize> = match route {
                Some(r) => r[ti].iter().map(|e| e - 1).collect(),
                None => top_k_indices(&logits, cfg.k),
            };
            let sel: Vec<f64> = chosen.iter().map(|&e| logits[e]).collect();
            let g = softmax_tau(&sel, 1.0);
            debug_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (&e, &ge) in chosen.iter().zip(&g) {
                let y = Self::expert(&b.experts[e], &z);
                row.iter_mut().zip(&y).for_each(|(x, v)| *x += ge * v);
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    block: bi,
                    token: ti,
                });
            }
            sets.push(chosen.iter().map(|e| e + 1).collect());
            gates.push(g);
        }
        Ok((sets, gates))
    }

    pub(crate) fn check_input(&self, h0: &[Vec<f64>]) -> Result<()> {
        let cfg = &self.cfg;
        if h0.len() != cfg.seq_len || h0.iter().any(|r| r.len() != cfg.emb_dim) {
            return Err(Error::Shape(format!(
                "input must be {}x{}",
                cfg.seq_len, cfg.emb_dim
            )));
        }
        Ok(())
    }

    fn run(&self, h0: &[Vec<f64>], route: Option<&RoutingPattern>) -> Result<ForwardTrace> {
        self.check_input(h0)?;
        let mut h = h0.to_vec();
        let mut subsets = Vec::with_capacity(self.cfg.blocks);
        let mut gates = Vec::with_capacity(self.cfg.blocks);
        for bi in 0..self.blocks.len() {
            let r = route.map(|p| p.subsets[bi].as_slice());
            let (s, g) = self.block_step(bi, &mut h, r)?;
            subsets.push(s);
            gates.push(g);
        }
        Ok(ForwardTrace {
            h_out: h,
            pattern: RoutingPattern { subsets },
            gates,
        })
    }

    pub fn forward(&self, h0: &[Vec<f64>]) -> Result<ForwardTrace> {
        self.run(h0, None)
    }

    /// Forward pass with expert sets fixed to `pattern`; the router still
    /// supplies the gate logits.
    pub fn forward_with_pattern(
        &self,
        h0: &[Vec<f64>],
        pattern: &RoutingPattern,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        if !pattern.is_member(cfg.experts, cfg.k, cfg.blocks, cfg.seq_len) {
            return Err(Error::Shape(
                "routing pattern does not match the config".into(),
            ));
        }
        self.run(h0, Some(pattern))
    }
}

// (rows × cols) row-major matrix times column vector
fn left_mul_rows(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Seeded input with entries uniform in `±M0`, exactly representable as `f32`.
pub fn random_input(cfg: &ArchConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m0 = cfg.input_bound as f32;
    (0..cfg.seq_len)
        .map(|_| {
            (0..cfg.emb_dim)
                .map(|_| rng.random_range(-m0..=m0) as f64)
                .collect()
        })
        .collect()
}

/// The small seeded configuration used by the stability checks:
/// `D = d_emb = w = 8`, `ℓ = 4`, `m = 2`, `L_T = 2`, `M = 4`, `k = 2`,
/// `L_FFN = 2`, all bounds 1.
pub fn small_config() -> ArchConfig {
    ArchConfig {
        ambient_dim: 8,
        seq_len: 4,
        emb_dim: 8,
        heads: 2,
        blocks: 2,
        experts: 4,
        k: 2,
        ffn_depth: 2,
        ffn_width: 8,
        weight_bound: 1.0,
        output_bound: 1.0,
        input_bound: 1.0,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::accounting::active_budget;

    pub(crate) fn small_cfg() -> ArchConfig {
        small_config()
    }

    #[test]
    fn zero_model_is_identity() {
        let cfg = small_cfg();
        let model = MoEModel::zeros(&cfg).unwrap();
        let h0 = random_input(&cfg, 1);
        let tr = model.forward(&h0).unwrap();
        assert_eq!(tr.h_out, h0);
        for b in &tr.pattern.subsets {
            for s in b {
                assert_eq!(s, &vec![1, 2]);
            }
        }
        assert!(tr.gates.iter().flatten().all(|g| g == &vec![0.5, 0.5]));
    }

    #[test]
    fn single_path_composition() {
        let mut cfg = small_cfg();
        cfg.blocks = 1;
        cfg.seq_len = 1;
        cfg.experts = 1;
        cfg.k = 1;
        cfg.emb_dim = 4;
        cfg.heads = 1;
        cfg.ffn_width = 4;
        let mut model = MoEModel::zeros(&cfg).unwrap();
        let bias = [0.25, -0.5, 0.125, 1.0];
        {
            let b = &mut model.blocks[0];
            b.ln_moe.scale.fill(1.0);
            for i in 0..4 {
                b.experts[0][0].weight[i * 4 + i] = 1.0;
                b.experts[0][1].weight[i * 4 + i] = 1.0;
            }
            b.experts[0][1].bias.copy_from_slice(&bias);
        }
        let h0 = vec![vec![0.3, -1.2, 0.7, 0.1]];
        let out = model.forward(&h0).unwrap().h_out;
        // independent recomputation: H0 + relu(LN(H0)) + b
        let x = &h0[0];
        let mean = x.iter().sum::<f64>() / 4.0;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        for i in 0..4 {
            let ln = (x[i] - mean) / (var + 1e-5).sqrt();
            let want = x[i] + ln.max(0.0) + bias[i];
            assert!((out[0][i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn random_model_is_deterministic_and_well_formed() {
        let cfg = small_cfg();
        let model = MoEModel::random(&cfg, 7).unwrap();
        assert_eq!(model, MoEModel::random(&cfg, 7).unwrap());
        assert!(model.max_abs_param() <= cfg.weight_bound);
        let h0 = random_input(&cfg, 3);
        let a = model.forward(&h0).unwrap();
        let b = model.forward(&h0).unwrap();
        assert_eq!(a, b);
        assert!(a
            .pattern
            .is_member(cfg.experts, cfg.k, cfg.blocks, cfg.seq_len));
        for g in a.gates.iter().flatten() {
            assert_eq!(g.len(), cfg.k);
            assert!(g.iter().all(|&v| v >= 0.0));
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let fixed = model.forward_with_pattern(&h0, &a.pattern).unwrap();
        assert_eq!(fixed, a);
    }

    #[test]
    fn param_count_matches_accounting_plus_extras() {
        let cfg = small_cfg();
        let model = MoEModel::zeros(&cfg).unwrap();
        let counts = active_budget(&cfg).unwrap();
        let d = cfg.emb_dim as u64;
        // attention plus all experts plus LayerNorm and router per block
        let per_block = counts.attn_per_block
            + cfg.experts as u64 * counts.expert_params
            + 4 * d
            + cfg.experts as u64 * d;
        assert_eq!(model.param_count() as u64, cfg.blocks as u64 * per_block);
    }

    #[test]
    fn shape_errors() {
        let cfg = small_cfg();
        let model = MoEModel::zeros(&cfg).unwrap();
        assert!(matches!(
            model.forward(&[vec![0.0; 8]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_is_reported() {
        let cfg = small_cfg();
        let mut model = MoEModel::zeros(&cfg).unwrap();
        model.blocks[1].experts[0][1].bias[0] = f64::INFINITY;
        let h0 = random_input(&cfg, 0);
        assert!(matches!(
            model.forward(&h0),
            Err(Error::NonFinite { block: 1, token: 0 })
        ));
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0; 5], 3), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.2, 0.5, 0.9], 2), vec![1, 4]);
    }

    #[test]
    fn realized_patterns_lie_in_enumerated_space() {
        use crate::accounting::enumerate_patterns;
        let mut cfg = small_cfg();
        cfg.seq_len = 2;
        cfg.blocks = 1;
        cfg.experts = 4;
        cfg.k = 2;
        let space: Vec<RoutingPattern> = enumerate_patterns(4, 2, 1, 2, 1000).unwrap().collect();
        for seed in 0..20 {
            let model = MoEModel::random(&cfg, seed).unwrap();
            let tr = model.forward(&random_input(&cfg, seed + 100)).unwrap();
            assert!(space.contains(&tr.pattern));
        }
    }
}
