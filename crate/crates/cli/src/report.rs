//! CSV artifacts. Floats carry 12 significant digits.

use std::path::Path;

use anyhow::Result;
use cellfree_core::io::write_atomic;
use cellfree_core::training::fmt_float;

pub const EVAL_HEADER: &str = "sample_id,method,sum_rate_nats,norm_rate";
pub const BASELINE_HEADER: &str = "sample_id,method,sum_rate_nats,converged,iters";
pub const SWEEP_HEADER: &str = "axis,axis_value,method,mean_norm_rate,std,n,seed";
pub const VERIFY_HEADER: &str = "check_name,status,detail";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sample_id: usize,
    pub method: String,
    pub sum_rate_nats: f64,
    pub norm_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub sample_id: usize,
    pub method: String,
    pub sum_rate_nats: f64,
    pub converged: bool,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub axis_value: usize,
    pub method: String,
    pub mean_norm_rate: f64,
    pub std: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub check_name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckRow {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            check_name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    pub fn status(&self) -> &'static str {
        if self.passed {
            "pass"
        } else {
            "fail"
        }
    }
}

fn table<T>(header: &str, rows: &[T], line: impl Fn(&T) -> String) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Keeps a free-text field inside one CSV column.
fn field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    table(EVAL_HEADER, rows, |r| {
        format!(
            "{},{},{},{}",
            r.sample_id,
            r.method,
            fmt_float(r.sum_rate_nats),
            fmt_float(r.norm_rate)
        )
    })
}

pub fn baseline_csv(rows: &[BaselineRow]) -> String {
    table(BASELINE_HEADER, rows, |r| {
        format!(
            "{},{},{},{},{}",
            r.sample_id,
            r.method,
            fmt_float(r.sum_rate_nats),
            r.converged,
            r.iters
        )
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    table(SWEEP_HEADER, rows, |r| {
        format!(
            "{},{},{},{},{},{},{}",
            r.axis,
            r.axis_value,
            r.method,
            fmt_float(r.mean_norm_rate),
            fmt_float(r.std),
            r.n,
            r.seed
        )
    })
}

pub fn verify_csv(rows: &[CheckRow]) -> String {
    table(VERIFY_HEADER, rows, |r| {
        format!("{},{},{}", r.check_name, r.status(), field(&r.detail))
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}
