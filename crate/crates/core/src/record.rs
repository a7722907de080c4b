//! Per-iteration training metrics and their CSV form.
//!
//! Columns are fixed: `iter,train_loss,eval_metric,w_delta,wall_ms`. Reals
//! are written with Rust's shortest round-trip formatting so identical runs
//! produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "iter,train_loss,eval_metric,w_delta,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub train_loss: f64,
    /// Validation MSE for regression, accuracy for classification.
    pub eval_metric: f64,
    /// Mean `‖W_t − W_{t−1}‖_F` over the steps since the previous row.
    pub w_delta: f64,
    /// Elapsed wall time; 0 unless timing was requested.
    pub wall_ms: u64,
}

pub fn to_csv(records: &[RunRecord]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut last: Option<usize> = None;
    for r in records {
        if last.is_some_and(|l| r.iter <= l) {
            return Err(Error::State(format!(
                "run record iterations must increase ({} after {})",
                r.iter,
                last.unwrap()
            )));
        }
        last = Some(r.iter);
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iter, r.train_loss, r.eval_metric, r.w_delta, r.wall_ms
        )
        .unwrap();
    }
    Ok(out)
}

pub fn write_csv(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(records)?).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header '{CSV_HEADER}'"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("'{s}': {e}")));
        out.push(RunRecord {
            iter: fields[0].parse().map_err(|e| parse_err(format!("iter: {e}")))?,
            train_loss: real(fields[1])?,
            eval_metric: real(fields[2])?,
            w_delta: real(fields[3])?,
            wall_ms: fields[4].parse().map_err(|e| parse_err(format!("wall_ms: {e}")))?,
        });
    }
    Ok(out)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
