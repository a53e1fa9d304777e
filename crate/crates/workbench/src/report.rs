//! Report files: JSON Lines records plus CSV tables.

use std::path::Path;

use serde::Serialize;

use clipladder_core::eval::EvalReport;
use clipladder_core::train::{CurvePoint, LineageRecord, StepRecord};

use crate::config::format_float;
use crate::error::{read_text, write_file, Error, Result};
use crate::evaluate::EvalOutcome;

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(format!("cannot serialise report: {e}")))
}

/// One JSON object per metric record.
pub fn report_jsonl(report: &EvalReport) -> Result<String> {
    let mut out = String::new();
    for r in &report.records {
        out.push_str(&json(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("benchmark,metric,k,transform,value\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.benchmark,
            r.metric.name(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.transform.map(|t| t.name()).unwrap_or(""),
            r.value
        ));
    }
    out
}

#[derive(Serialize)]
struct Summary {
    average_top1: Option<f64>,
    robustness_variant_average: Option<f64>,
    robustness_delta: Option<f64>,
}

/// Writes `report.jsonl`, `report.csv` and `summary.json` into `dir`.
pub fn write_eval_outcome(dir: &Path, outcome: &EvalOutcome) -> Result<()> {
    write_file(&dir.join("report.jsonl"), report_jsonl(&outcome.report)?)?;
    write_file(&dir.join("report.csv"), report_csv(&outcome.report))?;
    let summary = Summary {
        average_top1: outcome.report.average_top1(),
        robustness_variant_average: outcome.robustness.map(|r| r.0),
        robustness_delta: outcome.robustness.map(|r| r.1),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("summary.json"), text + "\n")
}

pub fn lineage_json(lineage: &LineageRecord) -> Result<String> {
    serde_json::to_string_pretty(lineage)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(format!("cannot serialise lineage: {e}")))
}

pub fn write_lineage(path: &Path, lineage: &LineageRecord) -> Result<()> {
    write_file(path, lineage_json(lineage)?)
}

pub fn read_lineage(path: &Path) -> Result<LineageRecord> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn scaling_curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("generation,name,total_params,vision_params,vision_gflops,train_gflops,top1,top5\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.generation,
            p.name,
            p.total_params,
            p.vision_params,
            format_float(p.vision_gflops),
            format_float(p.train_gflops),
            p.top1,
            p.top5
        ));
    }
    out
}

#[derive(Serialize)]
struct TraceLine<'a> {
    model: &'a str,
    stage: &'a str,
    #[serde(flatten)]
    record: &'a StepRecord,
}

/// One training-trace line.
pub fn trace_line(model: &str, stage: &str, record: &StepRecord) -> Result<String> {
    json(&TraceLine { model, stage, record })
}
