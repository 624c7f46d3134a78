//! CSV emission for telemetry, evaluation reports, consolidated metric
//! tables, sweeps, and pointwise APE series.
//!
//! Metric CSVs contain no timing, so repeated runs with the same seed are
//! byte-identical at any worker count. Floats print in Rust's shortest
//! round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use ppfl_core::federation::{RoundTelemetry, ValRecord};
use ppfl_core::metrics::EvalReport;
use ppfl_core::privacy::Epsilon;

pub const TELEMETRY_HEADER: &str =
    "round,client,train_loss,delta_l1_pre,delta_l1_post,noise_l1,seconds";

pub fn write_telemetry(path: &Path, rows: &[RoundTelemetry]) -> Result<()> {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            r.round, r.client, r.train_loss, r.delta_l1_pre, r.delta_l1_post, r.noise_l1, r.seconds
        )?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_val_records(path: &Path, rows: &[ValRecord]) -> Result<()> {
    let mut out = String::from("round,client,val_loss\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.round, r.client, r.val_loss)?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Per-client rows plus an `aggregate` row of unweighted means.
pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, eval_report_csv(report))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from("client,mase,mape,n_points,n_excluded\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.client, r.mase, r.mape, r.n_points, r.n_excluded);
    }
    let points: usize = report.rows.iter().map(|r| r.n_points).sum();
    let excluded: usize = report.rows.iter().map(|r| r.n_excluded).sum();
    let _ = writeln!(
        out,
        "aggregate,{},{},{},{}",
        report.aggregate_mase, report.aggregate_mape, points, excluded
    );
    out
}

/// One consolidated row per run: method, budget, aggregate errors.
pub fn write_metrics_table(path: &Path, rows: &[(String, Epsilon, f64, f64)]) -> Result<()> {
    let mut out = String::from("method,epsilon,mase,mape\n");
    for (method, eps, mase, mape) in rows {
        writeln!(out, "{method},{eps},{mase},{mape}")?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Budget sweep: one row per ε.
pub fn write_sweep(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut out = String::from("epsilon,mase,mape\n");
    for (eps, mase, mape) in rows {
        writeln!(out, "{eps},{mase},{mape}")?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Pointwise APE rows for one or more clients:
/// `client,index,actual_kwh,forecast_kwh,ape_pct`. Excluded (zero-actual)
/// points keep their row with an empty APE cell. `last_n` keeps only each
/// client's final points.
pub struct ApeBlock {
    pub client: u32,
    pub actual_kwh: Vec<f64>,
    pub forecast_kwh: Vec<f64>,
    pub ape: Vec<Option<f64>>,
}

pub fn write_ape(path: &Path, blocks: &[ApeBlock], last_n: Option<usize>) -> Result<()> {
    let mut out = String::from("client,index,actual_kwh,forecast_kwh,ape_pct\n");
    for block in blocks {
        let n = block.ape.len();
        let start = match last_n {
            Some(k) => n.saturating_sub(k),
            None => 0,
        };
        for i in start..n {
            let ape_cell = match block.ape[i] {
                Some(v) => v.to_string(),
                None => String::new(),
            };
            writeln!(
                out,
                "{},{},{},{},{}",
                block.client, i, block.actual_kwh[i], block.forecast_kwh[i], ape_cell
            )?;
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
