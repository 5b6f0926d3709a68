//! CSV writers. Reals are written with 17 significant digits so repeated
//! runs produce byte-identical files.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::measure_flow::MeasureFlow;
use crate::mc_oracle::McEstimate;
use crate::pia::{ConvergenceReport, VanishingEntry};
use crate::value_pde::AuxValueField;
use crate::verify::{DeviationReport, LemmaReport, ResidualField};

/// `{:.16e}` formatting of a real; empty for a missing value.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numeric(format!("csv: {other:?}")),
    }
}

/// Writes a header and rows of preformatted cells.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_convergence(path: &Path, report: &ConvergenceReport) -> Result<()> {
    write_csv(
        path,
        &["k", "d_m", "d_J", "ratio", "seconds"],
        report.records.iter().map(|r| {
            vec![
                r.k.to_string(),
                real(r.d_m),
                real(r.d_j),
                opt_real(r.ratio),
                real(r.seconds),
            ]
        }),
    )
}

pub fn write_diagonal(path: &Path, grid: &GridSpec, value: &AuxValueField) -> Result<()> {
    let rows = (0..=grid.n_time).flat_map(|j| {
        (0..grid.nx()).map(move |i| {
            vec![
                real(grid.times[j]),
                real(grid.space.nodes[i]),
                real(value.diagonal.row(j)[i]),
                real(value.diagonal_gradient.row(j)[i]),
            ]
        })
    });
    write_csv(path, &["t", "x", "J", "DxJ"], rows)
}

pub fn write_density(path: &Path, grid: &GridSpec, flow: &MeasureFlow) -> Result<()> {
    let rows = (0..=grid.n_time).flat_map(|j| {
        (0..grid.nx()).map(move |i| vec![real(grid.times[j]), real(grid.space.nodes[i]), real(flow.density(j)[i])])
    });
    write_csv(path, &["t", "x", "p"], rows)
}

/// `V(t_{j_t}, s, x)` for every level `s >= t`.
pub fn write_value_slice(path: &Path, grid: &GridSpec, value: &AuxValueField, j_t: usize) -> Result<()> {
    if j_t > grid.n_time {
        return Err(Error::Index(format!("slice {j_t} outside 0..={}", grid.n_time)));
    }
    let rows = (j_t..=grid.n_time).flat_map(|j_s| {
        (0..grid.nx()).map(move |i| {
            vec![
                real(grid.times[j_t]),
                real(grid.times[j_s]),
                real(grid.space.nodes[i]),
                real(value.value(j_t, j_s)[i]),
            ]
        })
    });
    write_csv(path, &["t", "s", "x", "V"], rows)
}

pub fn write_vanishing(path: &Path, entries: &[VanishingEntry]) -> Result<()> {
    write_csv(
        path,
        &["lambda", "max_lambda_entropy", "J_gap", "m_gap", "residual", "iters", "converged"],
        entries.iter().map(|e| {
            vec![
                real(e.lambda),
                real(e.max_lambda_entropy),
                opt_real(e.j_gap),
                opt_real(e.m_gap),
                real(e.residual),
                e.iterations.to_string(),
                e.converged.to_string(),
            ]
        }),
    )
}

pub fn write_residual(path: &Path, grid: &GridSpec, residual: &ResidualField, bound: f64) -> Result<()> {
    write_csv(
        path,
        &["t", "max_abs", "bound"],
        residual
            .slice_max
            .iter()
            .enumerate()
            .map(|(j, m)| vec![real(grid.times[j]), real(*m), real(bound)]),
    )
}

pub fn write_deviation(path: &Path, report: &DeviationReport) -> Result<()> {
    write_csv(
        path,
        &["t", "x", "policy", "epsilon", "gain", "stderr"],
        report.rows.iter().map(|r| {
            vec![
                real(r.t),
                real(r.x),
                r.policy.clone(),
                real(r.epsilon),
                real(r.gain),
                opt_real(r.stderr),
            ]
        }),
    )
}

pub fn write_lemmas(path: &Path, report: &LemmaReport) -> Result<()> {
    write_csv(
        path,
        &["check", "probe", "value", "bound", "pass"],
        report.rows.iter().map(|r| {
            vec![
                r.check.clone(),
                r.probe.clone(),
                real(r.value),
                real(r.bound),
                r.pass.to_string(),
            ]
        }),
    )
}

/// One Monte Carlo value query next to the PDE value at the same point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McQuery {
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub estimate: McEstimate,
    pub pde: f64,
}

pub fn write_mc_report(path: &Path, queries: &[McQuery]) -> Result<()> {
    write_csv(
        path,
        &["t", "s", "x", "estimate", "stderr", "n", "seed", "pde"],
        queries.iter().map(|q| {
            vec![
                real(q.t),
                real(q.s),
                real(q.x),
                real(q.estimate.estimate),
                real(q.estimate.stderr),
                q.estimate.n.to_string(),
                q.estimate.seed.to_string(),
                real(q.pde),
            ]
        }),
    )
}
