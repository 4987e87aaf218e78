//! Binary model format, all little-endian:
//!
//! 1. nine `u32`: `D, ℓ, d_emb, m, L_T, M, k, L_FFN, w_FFN`
//! 2. three `f64`: `κ, R, M0`
//! 3. one version byte ([`FORMAT_VERSION`]; version 1 means LayerNorm ε = 1e-5)
//! 4. every parameter as `f32`, block by block: attention LayerNorm scale and
//!    shift, then per head `W_Q, W_K, W_V` (`d_emb × d_h` row-major), `W_O`,
//!    MoE LayerNorm scale and shift, router (`M × d_emb`), then per expert
//!    and layer the weight (`out × in` row-major) followed by the bias.

use std::io::{Read, Write};

use super::MoEModel;
use crate::accounting::ArchConfig;
use crate::{Error, Result};

pub const FORMAT_VERSION: u8 = 1;

pub fn write_model<W: Write>(model: &MoEModel, mut out: W) -> Result<()> {
    let c = &model.cfg;
    for v in [
        c.ambient_dim,
        c.seq_len,
        c.emb_dim,
        c.heads,
        c.blocks,
        c.experts,
        c.k,
        c.ffn_depth,
        c.ffn_width,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} does not fit in u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for v in [c.weight_bound, c.output_bound, c.input_bound] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&[FORMAT_VERSION])?;
    let mut copy = model.clone();
    for t in copy.tensors_mut() {
        for v in t.data.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(bytes: &[u8], pos: &mut usize) -> Result<[u8; N]> {
    let end = *pos + N;
    let chunk = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::Format(format!("model file truncated at byte {}", *pos)))?;
    *pos = end;
    Ok(chunk.try_into().unwrap())
}

pub fn read_model<R: Read>(mut input: R) -> Result<MoEModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut ints = [0usize; 9];
    for v in &mut ints {
        *v = u32::from_le_bytes(take(&bytes, &mut pos)?) as usize;
    }
    let mut reals = [0f64; 3];
    for v in &mut reals {
        *v = f64::from_le_bytes(take(&bytes, &mut pos)?);
    }
    let [version] = take::<1>(&bytes, &mut pos)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let cfg = ArchConfig {
        ambient_dim: ints[0],
        seq_len: ints[1],
        emb_dim: ints[2],
        heads: ints[3],
        blocks: ints[4],
        experts: ints[5],
        k: ints[6],
        ffn_depth: ints[7],
        ffn_width: ints[8],
        weight_bound: reals[0],
        output_bound: reals[1],
        input_bound: reals[2],
    };
    let mut model = MoEModel::zeros(&cfg)?;
    let expected: usize = model.param_count() * 4;
    if bytes.len() - pos != expected {
        return Err(Error::Format(format!(
            "expected {expected} parameter bytes, found {}",
            bytes.len() - pos
        )));
    }
    for t in model.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = f32::from_le_bytes(take(&bytes, &mut pos)?) as f64;
        }
    }
    if model.max_abs_param() > cfg.weight_bound {
        return Err(Error::Domain(format!(
            "parameter exceeds the bound κ = {}",
            cfg.weight_bound
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_cfg;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = MoEModel::random(&small_cfg(), 12).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        assert_eq!(buf.len(), 9 * 4 + 3 * 8 + 1 + 4 * model.param_count());
        assert_eq!(&buf[..4], &8u32.to_le_bytes());
        assert_eq!(buf[60], FORMAT_VERSION);
        assert_eq!(read_model(buf.as_slice()).unwrap(), model);
    }

    #[test]
    fn rejects_bad_files() {
        let model = MoEModel::random(&small_cfg(), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        assert!(read_model(&buf[..buf.len() - 2]).is_err());
        let mut bad = buf.clone();
        bad[60] = 9;
        assert!(read_model(bad.as_slice()).is_err());
        let mut big = buf.clone();
        let last = big.len() - 4;
        big[last..].copy_from_slice(&2.5f32.to_le_bytes());
        assert!(matches!(read_model(big.as_slice()), Err(Error::Domain(_))));
    }
}
