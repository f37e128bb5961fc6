//! Error metrics and tabular reports.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::grid::{Field, FieldSet, SystemId};
use crate::{Error, Result};

fn check_pair(pred: &Field, truth: &Field) -> Result<()> {
    if pred.grid() != truth.grid() {
        return Err(Error::Incompatible("prediction and truth grids differ".into()));
    }
    Ok(())
}

fn mean_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + (x - y).abs()) / a.len() as f64
}

fn root_mean_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + (x - y) * (x - y)) / a.len() as f64).sqrt()
}

pub fn mae(pred: &Field, truth: &Field) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(mean_abs(pred.data(), truth.data()))
}

pub fn rmse(pred: &Field, truth: &Field) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(root_mean_sq(pred.data(), truth.data()))
}

/// Run settings recorded alongside every report row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunInfo {
    pub lambda: Option<f64>,
    pub picard_iters: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoint_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub system: SystemId,
    pub method: String,
    pub field: String,
    pub mae: f64,
    pub rmse: f64,
    pub n_test: usize,
    pub info: RunInfo,
}

/// Per-field MAE and RMSE averaged over paired test samples.
pub fn evaluate_predictions(method: &str, preds: &[FieldSet], truth: &[FieldSet], info: &RunInfo) -> Result<Vec<ReportRow>> {
    if truth.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if preds.len() != truth.len() {
        return Err(Error::Incompatible(format!(
            "{} predictions for {} test samples",
            preds.len(),
            truth.len()
        )));
    }
    let system = truth[0].system();
    let n_fields = truth[0].fields().len();
    let per_sample: Vec<Vec<(f64, f64)>> = preds
        .par_iter()
        .zip(truth)
        .map(|(p, t)| {
            if p.system() != t.system() || p.fields().len() != t.fields().len() {
                return Err(Error::Incompatible("prediction and truth systems differ".into()));
            }
            p.fields()
                .iter()
                .zip(t.fields())
                .map(|(pf, tf)| Ok((mae(pf, tf)?, rmse(pf, tf)?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = truth.len() as f64;
    Ok((0..n_fields)
        .map(|i| ReportRow {
            system,
            method: method.to_string(),
            field: system.field_names()[i].to_string(),
            mae: per_sample.iter().map(|s| s[i].0).sum::<f64>() / n,
            rmse: per_sample.iter().map(|s| s[i].1).sum::<f64>() / n,
            n_test: truth.len(),
            info: info.clone(),
        })
        .collect())
}

pub const CSV_HEADER: &str = "system,method,field,mae,rmse,n_test,lambda,K,T,seed,checkpoint_digest";

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6e},{:.6e},{},{},{},{},{},{}",
            r.system.as_str(),
            r.method,
            r.field,
            r.mae,
            r.rmse,
            r.n_test,
            opt(&r.info.lambda),
            opt(&r.info.picard_iters),
            opt(&r.info.steps),
            opt(&r.info.seed),
            r.info.checkpoint_digest
        );
    }
    out
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

/// Published full-scale errors `(mae, rmse)` per field, for context only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceTarget {
    pub system: SystemId,
    pub method: &'static str,
    pub mae: [f64; 2],
    pub rmse: [f64; 2],
}

pub const REFERENCE_TARGETS: [ReferenceTarget; 6] = [
    ReferenceTarget {
        system: SystemId::ReactionDiffusion,
        method: "compose-eps",
        mae: [1.03e-2, 2.5e-3],
        rmse: [1.49e-2, 3.1e-3],
    },
    ReferenceTarget {
        system: SystemId::ReactionDiffusion,
        method: "compose-v",
        mae: [4.2e-3, 1.2e-3],
        rmse: [5.4e-3, 1.5e-3],
    },
    ReferenceTarget {
        system: SystemId::ReactionDiffusion,
        method: "fno",
        mae: [4e-4, 3e-4],
        rmse: [7e-4, 4e-4],
    },
    ReferenceTarget {
        system: SystemId::ModifiedBurgers,
        method: "compose-eps",
        mae: [9.4e-3, 1.12e-2],
        rmse: [1.26e-2, 1.54e-2],
    },
    ReferenceTarget {
        system: SystemId::ModifiedBurgers,
        method: "compose-v",
        mae: [9.8e-3, 1.1e-2],
        rmse: [1.3e-2, 1.52e-2],
    },
    ReferenceTarget {
        system: SystemId::ModifiedBurgers,
        method: "fno",
        mae: [1.1e-3, 1.2e-3],
        rmse: [1.6e-3, 1.7e-3],
    },
];

pub fn reference_target(system: SystemId, method: &str) -> Option<&'static ReferenceTarget> {
    REFERENCE_TARGETS.iter().find(|r| r.system == system && r.method == method)
}

/// Plain-text table of the rows with the published reference values beside them.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<8} {:<12} {:<6} {:>11} {:>11} {:>11} {:>11}\n",
        "system", "method", "field", "mae", "rmse", "ref mae", "ref rmse"
    );
    for r in rows {
        let idx = r.system.field_names().iter().position(|f| *f == r.field);
        let reference = reference_target(r.system, &r.method).zip(idx);
        let (rm, rr) = match reference {
            Some((t, i)) => (format!("{:.2e}", t.mae[i]), format!("{:.2e}", t.rmse[i])),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:<6} {:>11.3e} {:>11.3e} {:>11} {:>11}",
            r.system.as_str(),
            r.method,
            r.field,
            r.mae,
            r.rmse,
            rm,
            rr
        );
    }
    out
}
