//! Loss-curve fitting and the per-expert identity table.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use moesl_core::fitting::{
    amplification_fit, compute_exponent, consistency_check, fit_power_law, kappa_from_rows,
    per_expert_table, ExpertExponents, FitResult, FloorMode, LossCurve,
};

use super::read_text;
use crate::{CliError, CliResult, Outcome, TableArtifact};

const BUNDLED_PER_EXPERT: &str = include_str!("../../data/per_expert_exponents.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Model,
    Data,
    Compute,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// CSV with header `x,loss` (or `E,mu,nu` with `--per-expert`).
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Axis::Model)]
    pub axis: Axis,
    /// Fixed loss floor; searched when absent.
    #[arg(long)]
    pub floor: Option<f64>,
    /// Curve for the other axis (data when `--axis model`, model when
    /// `--axis data`); adds consistency predictions.
    #[arg(long, conflicts_with = "per_expert")]
    #[serde(skip)]
    pub companion: Option<PathBuf>,
    /// Treat the input as per-expert exponents.
    #[arg(long)]
    pub per_expert: bool,
}

#[derive(Deserialize)]
struct LossRow {
    x: f64,
    loss: f64,
}

fn parse_points<R: std::io::Read>(reader: R, context: &str) -> CliResult<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::data(context, e))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "loss"] {
        return Err(CliError::data(
            context,
            format!(
                "expected header `x,loss`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    rdr.deserialize::<LossRow>()
        .map(|r| {
            r.map(|r| (r.x, r.loss))
                .map_err(|e| CliError::data(context, e))
        })
        .collect()
}

pub fn read_curve(path: &Path) -> CliResult<LossCurve> {
    let text = read_text(path)?;
    let ctx = path.display().to_string();
    Ok(LossCurve::new(parse_points(text.as_bytes(), &ctx)?)?)
}

fn fit_row(t: &mut TableArtifact, axis: Axis, fit: &FitResult) {
    let name = match axis {
        Axis::Model => "model",
        Axis::Data => "data",
        Axis::Compute => "compute",
    };
    t.push(vec![
        name.into(),
        fit.exponent.into(),
        fit.floor.into(),
        fit.log_prefactor.into(),
        fit.r_squared.into(),
        fit.n_points.into(),
        fit.rss.into(),
    ]);
}

pub fn fit(args: &FitArgs) -> CliResult<Outcome> {
    if args.per_expert {
        return per_expert(&PerExpertArgs {
            input: Some(args.input.clone()),
        });
    }
    let mode = args.floor.map_or(FloorMode::Search, FloorMode::Fixed);
    let main = fit_power_law(&read_curve(&args.input)?, mode)?;
    let mut t = TableArtifact::new([
        "axis",
        "exponent",
        "floor",
        "log_prefactor",
        "r_squared",
        "n_points",
        "rss",
    ]);
    fit_row(&mut t, args.axis, &main);
    if let Some(path) = &args.companion {
        let other_axis = match args.axis {
            Axis::Model => Axis::Data,
            Axis::Data => Axis::Model,
            Axis::Compute => {
                return Err(CliError::Usage(
                    "--companion needs --axis model or data".into(),
                ))
            }
        };
        let other = fit_power_law(&read_curve(path)?, mode)?;
        fit_row(&mut t, other_axis, &other);
        let (alpha_n, alpha_d) = match args.axis {
            Axis::Model => (main.exponent, other.exponent),
            _ => (other.exponent, main.exponent),
        };
        let c = consistency_check(alpha_n, alpha_d);
        t.note("alpha_D_pred", c.pred_d);
        t.note("r_D", c.r_d);
        t.note("rel_err_D", c.rel_err_d);
        t.note("alpha_C", compute_exponent(alpha_n, alpha_d));
        t.note("alpha_C_pred", alpha_n / (2.0 + alpha_n));
    }
    Ok(Outcome::ok(t))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PerExpertArgs {
    /// CSV with header `E,mu,nu`; the bundled six-row table when absent.
    #[serde(skip)]
    pub input: Option<PathBuf>,
}

pub fn parse_expert_rows(text: &str, context: &str) -> CliResult<Vec<ExpertExponents>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::data(context, e)))
        .collect()
}

pub fn per_expert(args: &PerExpertArgs) -> CliResult<Outcome> {
    let rows = match &args.input {
        Some(p) => parse_expert_rows(&read_text(p)?, &p.display().to_string())?,
        None => parse_expert_rows(BUNDLED_PER_EXPERT, "bundled per-expert table")?,
    };
    let table = per_expert_table(&rows)?;
    let kappa = kappa_from_rows(&table.rows);
    let mut t = TableArtifact::new([
        "E",
        "mu",
        "nu",
        "alpha_N",
        "alpha_D",
        "alpha_C",
        "alpha_D_pred",
        "alpha_C_pred",
        "r_D",
        "r_C",
        "rel_err_D",
        "rel_err_C",
        "kappa",
    ]);
    for (r, &(_, k)) in table.rows.iter().zip(&kappa) {
        t.push(vec![
            r.experts.into(),
            r.mu.into(),
            r.nu.into(),
            r.alpha_n.into(),
            r.alpha_d.into(),
            r.alpha_c.into(),
            r.alpha_d_pred.into(),
            r.alpha_c_pred.into(),
            r.r_d.into(),
            r.r_c.into(),
            r.rel_err_d.into(),
            r.rel_err_c.into(),
            k.into(),
        ]);
    }
    let s = table.summary;
    t.note("mae_r_D", s.mae_r_d);
    t.note("mae_r_C", s.mae_r_c);
    t.note("mape_r_D_percent", s.mape_r_d);
    t.note("mape_r_C_percent", s.mape_r_c);
    // a single row (or a single E) gives no amplification fit
    if let Ok(fit) = amplification_fit(&kappa) {
        t.note("kappa_fit_A", fit.a);
        t.note("kappa_fit_B", fit.b);
        t.note("kappa_fit_r_squared", fit.r_squared);
    }
    Ok(Outcome::ok(t))
}
