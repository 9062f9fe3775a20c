//! Projection / learning / total error fields and their L1/L2/Linf
//! summaries.
//!
//! Norm convention (id "l1-mean-abs_l2-snap-norm-over-M_linf-global-max"):
//! per snapshot column e_t, l1_t = ||e_t||_1 / M and l2_t = ||e_t||_2 / M;
//! L1 and L2 average those over time; Linf is the global maximum entry
//! magnitude over the whole window.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::SnapshotMatrix;
use crate::error::{Error, Result};

pub const NORM_CONVENTION: &str = "l1-mean-abs_l2-snap-norm-over-M_linf-global-max";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    pub projection: ErrorSummary,
    pub learning: ErrorSummary,
    pub total: ErrorSummary,
    pub n_snapshots: usize,
    pub norm_convention: String,
    /// Per-snapshot L2 triangle inequality held for every snapshot.
    pub triangle_ok: bool,
}

/// Elementwise difference, estimate minus reference.
pub fn error_fields(q_ref: &SnapshotMatrix, q_hat: &SnapshotMatrix) -> Result<Array2<f64>> {
    if q_ref.values.dim() != q_hat.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "reference {:?} vs estimate {:?}",
            q_ref.values.dim(),
            q_hat.values.dim()
        )));
    }
    Ok(&q_hat.values - &q_ref.values)
}

/// Summarize one error matrix under the module norm convention.
pub fn summarize(e: &Array2<f64>) -> ErrorSummary {
    let (m, nt) = e.dim();
    assert!(m > 0 && nt > 0, "empty error matrix");
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut linf = 0.0f64;
    for t in 0..nt {
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for i in 0..m {
            let v = e[[i, t]];
            abs_sum += v.abs();
            sq_sum += v * v;
            linf = linf.max(v.abs());
        }
        l1 += abs_sum / m as f64;
        l2 += sq_sum.sqrt() / m as f64;
    }
    ErrorSummary {
        l1: l1 / nt as f64,
        l2: l2 / nt as f64,
        linf,
    }
}

/// Build the three-way report over an aligned window. All inputs must cover
/// exactly the snapshots that have predictions.
pub fn error_report(
    q_truth: &SnapshotMatrix,
    q_proj: &SnapshotMatrix,
    q_pred: &SnapshotMatrix,
) -> Result<ErrorReport> {
    let proj = error_fields(q_truth, q_proj)?;
    let learning = error_fields(q_proj, q_pred)?;
    let total = error_fields(q_truth, q_pred)?;

    let (m, nt) = total.dim();
    let _ = m;
    let mut triangle_ok = true;
    for t in 0..nt {
        let col = |e: &Array2<f64>| -> f64 {
            e.column(t).iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let tt = col(&total);
        let pp = col(&proj);
        let ll = col(&learning);
        if tt > pp + ll + 1e-12 * (pp + ll).max(1.0) {
            triangle_ok = false;
        }
    }
    Ok(ErrorReport {
        projection: summarize(&proj),
        learning: summarize(&learning),
        total: summarize(&total),
        n_snapshots: nt,
        norm_convention: NORM_CONVENTION.to_string(),
        triangle_ok,
    })
}

/// One row of errors.csv: a configuration label plus kind x norm columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorCsvRow {
    pub label: String,
    pub modes: usize,
    pub frequencies: usize,
    pub n_tau_f: usize,
    pub seed: u64,
    pub report: ErrorReport,
}

pub fn write_errors_csv(path: &Path, rows: &[ErrorCsvRow]) -> Result<()> {
    let mut out = String::from(
        "label,modes,frequencies,n_tau_f,seed,\
         projection_l1,projection_l2,projection_linf,\
         learning_l1,learning_l2,learning_linf,\
         total_l1,total_l2,total_linf,n_snapshots,triangle_ok\n",
    );
    for r in rows {
        let p = &r.report.projection;
        let l = &r.report.learning;
        let t = &r.report.total;
        out.push_str(&format!(
            "{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}\n",
            r.label,
            r.modes,
            r.frequencies,
            r.n_tau_f,
            r.seed,
            p.l1,
            p.l2,
            p.linf,
            l.l1,
            l.l2,
            l.linf,
            t.l1,
            t.l2,
            t.linf,
            r.report.n_snapshots,
            r.report.triangle_ok
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
