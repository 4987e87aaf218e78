//! Levina-Bickel maximum-likelihood intrinsic dimension with exact kNN.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::numeric::{mad, median, orthonormal_frame};
use crate::{Error, Result};

pub const DEFAULT_NEIGHBORS: usize = 20;
pub const DEFAULT_SUBSAMPLES: usize = 8;

/// `n` vectors of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("vector dimension must be positive".into()));
        }
        if data.len() != n * dim {
            return Err(Error::Shape(format!(
                "expected {} values for {n}x{dim}, got {}",
                n * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry in row {}, column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!(
                "row {i} has {} columns, expected {dim}",
                rows[i].len()
            )));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn map_rows<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.n).map(|i| f(self.row(i))).collect();
        Self::from_rows(&rows)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Exact k nearest distances from `query` to the other members of `pool`.
/// Indices in errors refer to positions in `points`.
fn nearest(points: &EmbeddingSet, pool: &[usize], query: usize, k: usize) -> Result<Vec<f64>> {
    // (distance, index) kept sorted, length <= k
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let q = points.row(query);
    for &j in pool {
        if j == query {
            continue;
        }
        let dist = distance(q, points.row(j));
        if best.len() == k && dist >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(d, _)| d <= dist);
        best.insert(pos, (dist, j));
        best.truncate(k);
    }
    if best.len() < k {
        return Err(Error::InsufficientData {
            needed: k + 1,
            got: pool.len(),
        });
    }
    if let Some(&(_, j)) = best.iter().find(|(d, _)| *d == 0.0) {
        return Err(Error::DuplicatePoint { query, neighbor: j });
    }
    Ok(best.into_iter().map(|(d, _)| d).collect())
}

/// Ascending distances `T_1 <= ... <= T_k` from each query to its k nearest
/// other points.
pub fn knn_distances(points: &EmbeddingSet, queries: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k >= points.len() {
        return Err(Error::InsufficientData {
            needed: k + 1,
            got: points.len(),
        });
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= points.len()) {
        return Err(Error::Shape(format!("query index {q} out of range")));
    }
    let pool: Vec<usize> = (0..points.len()).collect();
    queries
        .par_iter()
        .map(|&q| nearest(points, &pool, q, k))
        .collect()
}

/// `[ (1/(k-1)) Σ_{j<k} ln(T_k / T_j) ]^{-1}` over the first `k` distances.
pub fn levina_bickel_point(t: &[f64], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Domain(format!("k = {k} must be at least 2")));
    }
    if t.len() < k {
        return Err(Error::InsufficientData {
            needed: k,
            got: t.len(),
        });
    }
    let t = &t[..k];
    if t.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("neighbor distances must be positive".into()));
    }
    let tk = t[k - 1];
    let s: f64 = t[..k - 1].iter().map(|&tj| (tk / tj).ln()).sum();
    if s <= 0.0 {
        return Err(Error::DegenerateNeighborhood { k });
    }
    Ok((k - 1) as f64 / s)
}

/// How per-point estimates are combined within one subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Arithmetic mean of the per-point estimates.
    #[default]
    Mean,
    /// Inverse of the mean inverse estimate.
    Harmonic,
}

impl Aggregator {
    fn combine(self, values: &[f64]) -> f64 {
        let n = values.len() as f64;
        match self {
            Aggregator::Mean => values.iter().sum::<f64>() / n,
            Aggregator::Harmonic => n / values.iter().map(|v| 1.0 / v).sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdParams {
    pub k: usize,
    pub n_subsamples: usize,
    pub subsample_size: usize,
    pub seed: u64,
    pub aggregator: Aggregator,
}

impl IdParams {
    /// Default neighbor and subsample counts with the given size and seed.
    pub fn new(subsample_size: usize, seed: u64) -> Self {
        Self {
            k: DEFAULT_NEIGHBORS,
            n_subsamples: DEFAULT_SUBSAMPLES,
            subsample_size,
            seed,
            aggregator: Aggregator::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdEstimate {
    pub median: f64,
    pub mad: f64,
    pub per_subsample: Vec<f64>,
    pub k_neighbors: usize,
    pub subsample_size: usize,
    pub seed: u64,
}

fn subsample_estimate(points: &EmbeddingSet, pool: &[usize], p: &IdParams) -> Result<f64> {
    let per_point = pool
        .iter()
        .map(|&q| levina_bickel_point(&nearest(points, pool, q, p.k)?, p.k))
        .collect::<Result<Vec<f64>>>()?;
    Ok(p.aggregator.combine(&per_point))
}

/// Median and MAD of subsample-level estimates. Index draws come from one
/// seeded stream, so the result depends only on `params.seed`.
pub fn estimate_id(points: &EmbeddingSet, params: &IdParams) -> Result<IdEstimate> {
    let p = *params;
    if p.n_subsamples == 0 {
        return Err(Error::InvalidConfig("need at least one subsample".into()));
    }
    if p.k < 2 {
        return Err(Error::InvalidConfig(format!(
            "k = {} must be at least 2",
            p.k
        )));
    }
    if p.subsample_size > points.len() {
        return Err(Error::InvalidConfig(format!(
            "subsample size {} exceeds the {} available points",
            p.subsample_size,
            points.len()
        )));
    }
    if p.k + 1 > p.subsample_size {
        return Err(Error::InsufficientData {
            needed: p.k + 1,
            got: p.subsample_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let pools: Vec<Vec<usize>> = (0..p.n_subsamples)
        .map(|_| {
            let mut idx = sample(&mut rng, points.len(), p.subsample_size).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let per_subsample = pools
        .par_iter()
        .enumerate()
        .map(|(index, pool)| {
            subsample_estimate(points, pool, &p).map_err(|e| Error::Subsample {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(IdEstimate {
        median: median(&per_subsample),
        mad: mad(&per_subsample),
        per_subsample,
        k_neighbors: p.k,
        subsample_size: p.subsample_size,
        seed: p.seed,
    })
}

/// `n` uniform points in `[0,1]^d` placed in `R^ambient` by a random
/// orthonormal frame.
pub fn embedded_cube(n: usize, d: usize, ambient: usize, seed: u64) -> Result<EmbeddingSet> {
    if d == 0 || d > ambient {
        return Err(Error::InvalidConfig(format!(
            "manifold dimension {d} must be in 1..={ambient}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = orthonormal_frame(&mut rng, ambient, d);
    let mut data = Vec::with_capacity(n * ambient);
    for _ in 0..n {
        let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        data.extend((0..ambient).map(|a| (0..d).map(|c| u[c] * frame[c][a]).sum::<f64>()));
    }
    EmbeddingSet::new(n, ambient, data)
}

// ---- file formats ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingFormat {
    /// Binary if the header is consistent with the file length, CSV otherwise.
    #[default]
    Auto,
    Csv,
    Binary,
}

const HEADER_BYTES: usize = 8;

fn binary_header(bytes: &[u8]) -> Option<(usize, usize)> {
    if bytes.len() < HEADER_BYTES {
        return None;
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)?
        .checked_mul(4)?
        .checked_add(HEADER_BYTES)?;
    (expected == bytes.len()).then_some((n, d))
}

/// Header `(n, D)` as little-endian u32, then `n·D` little-endian f32, row-major.
pub fn parse_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    let (n, d) = binary_header(bytes).ok_or_else(|| {
        let expected = match bytes.get(..HEADER_BYTES) {
            Some(h) => {
                let n = u32::from_le_bytes(h[0..4].try_into().unwrap()) as u64;
                let d = u32::from_le_bytes(h[4..8].try_into().unwrap()) as u64;
                format!("{}", HEADER_BYTES as u64 + 4 * n * d)
            }
            None => format!("at least {HEADER_BYTES}"),
        };
        Error::Format(format!(
            "binary embedding length mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        ))
    })?;
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingSet::new(n, d, data)
}

/// One vector per line, comma separated, no header.
pub fn parse_csv(text: &str) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("no vectors in CSV input".into()));
    }
    EmbeddingSet::from_rows(&rows)
}

pub fn parse_embeddings(bytes: &[u8], format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let as_text =
        || std::str::from_utf8(bytes).map_err(|_| Error::Format("CSV input is not UTF-8".into()));
    match format {
        EmbeddingFormat::Binary => parse_binary(bytes),
        EmbeddingFormat::Csv => parse_csv(as_text()?),
        EmbeddingFormat::Auto if binary_header(bytes).is_some() => parse_binary(bytes),
        EmbeddingFormat::Auto => parse_csv(as_text()?),
    }
}

pub fn read_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_embeddings(&bytes, format)
}

/// Writes the binary format. Values are narrowed to f32.
pub fn write_binary<W: Write>(set: &EmbeddingSet, mut out: W) -> Result<()> {
    let n = u32::try_from(set.n).map_err(|_| Error::Shape("too many vectors".into()))?;
    let d = u32::try_from(set.dim).map_err(|_| Error::Shape("dimension too large".into()))?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&d.to_le_bytes())?;
    for v in &set.data {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}
