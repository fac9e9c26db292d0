//! Experiment reports and their CSV / JSON encodings.
//!
//! Every float is written with 17 significant digits, so parsing a JSON
//! report and emitting it again reproduces the same bytes.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Method, ReportFormat, ScenarioConfig};
use crate::error::{CgmError, Result};
use crate::experiment::TrialSeeds;

pub const CSV_HEADER: &str = "trial,t,method,l1_vs_baseline,l1_vs_truth,step_seconds,converged,sweeps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub trial: usize,
    pub t: usize,
    pub method: Method,
    /// `None` when this step or the baseline failed.
    pub l1_vs_baseline: Option<f64>,
    pub l1_vs_truth: Option<f64>,
    /// Wall time of the SBP solve for this step.
    pub step_seconds: f64,
    pub converged: bool,
    pub sweeps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportRow {
    pub fn failed(trial: usize, t: usize, method: Method, error: String) -> Self {
        Self {
            trial,
            t,
            method,
            l1_vs_baseline: None,
            l1_vs_truth: None,
            step_seconds: 0.0,
            converged: false,
            sweeps: 0,
            error: Some(error),
        }
    }
}

/// Mean and sample standard deviation over the trials that produced a value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { n, mean: None, std: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean: Some(mean), std: Some(std) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub t: usize,
    pub method: Method,
    pub l1_vs_baseline: Stat,
    pub l1_vs_truth: Stat,
    pub step_seconds: Stat,
}

/// Aggregates rows across trials per `(t, method)`.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, Method), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.t, r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((t, method), rs)| {
            let collect = |f: fn(&ReportRow) -> Option<f64>| -> Vec<f64> { rs.iter().filter_map(|r| f(r)).collect() };
            SummaryRow {
                t,
                method,
                l1_vs_baseline: Stat::of(&collect(|r| r.l1_vs_baseline)),
                l1_vs_truth: Stat::of(&collect(|r| r.l1_vs_truth)),
                step_seconds: Stat::of(&collect(|r| r.error.is_none().then_some(r.step_seconds))),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub version: String,
    pub config: ScenarioConfig,
    pub trial_seeds: Vec<TrialSeeds>,
    /// How convergence was decided; the tolerance itself is in `config`.
    pub convergence_test: String,
    /// Number of baseline steps certified by the oracle, when requested.
    pub oracle_checks: Option<usize>,
}

impl ReportMetadata {
    pub fn new(config: ScenarioConfig, trial_seeds: Vec<TrialSeeds>, oracle_checks: Option<usize>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            trial_seeds,
            convergence_test: "max absolute message change over one sweep <= tol (default tolerance choice)".into(),
            oracle_checks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    /// Mean of `l1_vs_baseline` over all successful rows of `method`.
    pub fn mean_error(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method).filter_map(|r| r.l1_vs_baseline).collect();
        Stat::of(&v).mean
    }
}

/// Float text with 17 significant digits.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn to_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.trial,
            r.t,
            r.method,
            format_opt(r.l1_vs_baseline),
            format_opt(r.l1_vs_truth),
            format_float(r.step_seconds),
            r.converged,
            r.sweeps
        ));
    }
    out
}

struct FixedDigits;

impl serde_json::ser::Formatter for FixedDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_float(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json(report: &ExperimentReport) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits);
    report
        .serialize(&mut ser)
        .map_err(|e| CgmError::Validation(format!("report serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn from_json(text: &str) -> Result<ExperimentReport> {
    serde_json::from_str(text).map_err(|e| CgmError::Validation(format!("malformed report: {e}")))
}

pub fn render(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => Ok(to_csv(report)),
        ReportFormat::Json => to_json(report),
    }
}

pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render(report, format)?;
    std::fs::write(path, text).map_err(|source| CgmError::Io { path: path.to_owned(), source })
}
