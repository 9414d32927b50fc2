//! Metric export: a versioned JSON envelope plus plottable CSV tables
//! whose state labels match the published result tables verbatim.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::nn::Metrics;

use super::{FederatedReport, PairwiseReport, SequentialReport};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Wraps scenario results with the schema version and run identity.
#[derive(Debug, Serialize)]
pub struct ReportEnvelope<T: Serialize> {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub results: T,
}

impl<T: Serialize> ReportEnvelope<T> {
    pub fn new(scenario: impl Into<String>, seed: u64, results: T) -> ReportEnvelope<T> {
        ReportEnvelope {
            schema_version: METRICS_SCHEMA_VERSION,
            scenario: scenario.into(),
            seed,
            results,
        }
    }
}

fn push_metric_row(w: &mut csv::Writer<Vec<u8>>, state: &str, class: &str, m: &Metrics) -> Result<()> {
    w.write_record([
        state,
        class,
        &format!("{:.6}", m.accuracy),
        &format!("{:.6}", m.detection_rate),
        &format!("{:.6}", m.false_alarm_rate),
        &m.n.to_string(),
    ])?;
    Ok(())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Three state rows per zero-day class, as in the pairwise result table.
pub fn pairwise_csv(report: &PairwiseReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["state", "zero_day", "accuracy", "detection_rate", "false_alarm_rate", "n"])?;
    for cell in &report.cells {
        push_metric_row(&mut w, "Before Update (zero-day)", &cell.zero_day, &cell.before_zero_day)?;
        push_metric_row(&mut w, "After Update (zero-day)", &cell.zero_day, &cell.after_zero_day)?;
        push_metric_row(&mut w, "After Update (initial)", &cell.zero_day, &cell.after_initial)?;
    }
    finish(w)
}

/// The union zero-day set before and after, and the known class after.
pub fn federated_csv(report: &FederatedReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["state", "accuracy", "detection_rate", "false_alarm_rate", "n"])?;
    for (state, m) in [
        ("Unknowns-Before", &report.unknowns_before),
        ("Unknowns-After", &report.unknowns_after),
        ("Known-After", &report.known_after),
    ] {
        w.write_record([
            state,
            &format!("{:.6}", m.accuracy),
            &format!("{:.6}", m.detection_rate),
            &format!("{:.6}", m.false_alarm_rate),
            &m.n.to_string(),
        ])?;
    }
    finish(w)
}

/// Long-format per-step rows, one per permutation and step.
pub fn sequential_csv(report: &SequentialReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "permutation",
        "step",
        "class",
        "before_zero_day",
        "after_zero_day",
        "known_after",
        "teacher_agreement",
    ])?;
    for (p, run) in report.runs.iter().enumerate() {
        for step in &run.steps {
            w.write_record([
                &p.to_string(),
                &step.step.to_string(),
                &step.class,
                &format!("{:.6}", step.before_zero_day),
                &format!("{:.6}", step.after_zero_day),
                &format!("{:.6}", step.known_after),
                &format!("{:.6}", step.teacher_agreement),
            ])?;
        }
    }
    finish(w)
}

/// Writes `{scenario}.json` (the enveloped results) and any CSV tables
/// under `dir`, creating it when missing.
pub fn write_report_files<T: Serialize>(
    dir: &Path,
    scenario: &str,
    seed: u64,
    results: &T,
    tables: &[(&str, String)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let envelope = ReportEnvelope::new(scenario, seed, results);
    let mut text = serde_json::to_string_pretty(&envelope)?;
    text.push('\n');
    fs::write(dir.join(format!("{scenario}.json")), text)?;
    for (name, table) in tables {
        fs::write(dir.join(name), table)?;
    }
    Ok(())
}
