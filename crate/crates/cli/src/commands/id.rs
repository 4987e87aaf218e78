use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;

use moesl_core::intrinsic_dim::{
    estimate_id, parse_embeddings, Aggregator, EmbeddingFormat, IdParams, DEFAULT_NEIGHBORS,
    DEFAULT_SUBSAMPLES,
};

use super::read_bytes;
use crate::{CliError, CliResult, Outcome, TableArtifact};

/// Subsample size used when `--size` is absent (capped at the point count).
pub const DEFAULT_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Auto,
    Csv,
    Bin,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IdArgs {
    /// Embedding file: CSV rows or the binary `(n, D)` + f32 layout.
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Auto)]
    #[serde(skip)]
    pub format: Format,
    /// Neighbors per point.
    #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SUBSAMPLES)]
    pub subsamples: usize,
    /// Points per subsample.
    #[arg(long)]
    pub size: Option<usize>,
    /// Combine per-point estimates by harmonic mean.
    #[arg(long)]
    pub harmonic: bool,
}

pub fn id_estimate(args: &IdArgs, seed: u64) -> CliResult<Outcome> {
    let bytes = read_bytes(&args.input)?;
    let format = match args.format {
        Format::Auto => EmbeddingFormat::Auto,
        Format::Csv => EmbeddingFormat::Csv,
        Format::Bin => EmbeddingFormat::Binary,
    };
    let points = match parse_embeddings(&bytes, format) {
        Ok(p) => p,
        // neither a consistent binary header nor text: ask for an explicit format
        Err(_) if format == EmbeddingFormat::Auto && std::str::from_utf8(&bytes).is_err() => {
            let detail = parse_embeddings(&bytes, EmbeddingFormat::Binary).unwrap_err();
            return Err(CliError::Usage(format!(
                "{}: cannot detect the embedding format ({detail}); pass --format csv or --format bin",
                args.input.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let params = IdParams {
        k: args.k,
        n_subsamples: args.subsamples,
        subsample_size: args.size.unwrap_or(DEFAULT_SIZE.min(points.len())),
        seed,
        aggregator: if args.harmonic {
            Aggregator::Harmonic
        } else {
            Aggregator::Mean
        },
    };
    let est = estimate_id(&points, &params)?;
    let mut t = TableArtifact::new(["subsample", "estimate"]);
    for (i, v) in est.per_subsample.iter().enumerate() {
        t.push(vec![i.into(), (*v).into()]);
    }
    t.note("median", est.median);
    t.note("mad", est.mad);
    t.note("points", points.len());
    t.note("ambient_dim", points.dim());
    t.note("k", est.k_neighbors);
    t.note("subsample_size", est.subsample_size);
    Ok(Outcome::ok(t))
}
