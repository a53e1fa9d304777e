use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::preprocess::TransformMode;
use super::retrieval::mean_recall;
use crate::error::{bail, Result};

/// What a metric record measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Top1,
    Top5,
    ImageToTextRecall,
    TextToImageRecall,
    MeanRecall,
    VideoScore,
    LinearProbeTop1,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Top1 => "top1",
            MetricKind::Top5 => "top5",
            MetricKind::ImageToTextRecall => "i2t_recall",
            MetricKind::TextToImageRecall => "t2i_recall",
            MetricKind::MeanRecall => "mean_recall",
            MetricKind::VideoScore => "video_score",
            MetricKind::LinearProbeTop1 => "linear_probe_top1",
        }
    }
}

/// One measured value. Accuracies and recalls are in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub benchmark: String,
    pub metric: MetricKind,
    /// Recall cut-off for recall metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformMode>,
    pub value: f64,
}

/// Per-benchmark records in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
}

impl EvalReport {
    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    /// Records sorted by benchmark, metric, k and transform.
    pub fn sorted(mut self) -> Self {
        self.records.sort_by(|a, b| {
            (&a.benchmark, a.metric, a.k, a.transform).cmp(&(&b.benchmark, b.metric, b.k, b.transform))
        });
        self
    }

    /// Best top-1 of a benchmark over the transforms evaluated, with the
    /// transform that produced it (lower enum order wins ties).
    pub fn top1(&self, benchmark: &str) -> Option<(f64, Option<TransformMode>)> {
        self.records
            .iter()
            .filter(|r| r.benchmark == benchmark && r.metric == MetricKind::Top1)
            .fold(None, |best: Option<(f64, Option<TransformMode>)>, r| match best {
                Some((v, t)) if v > r.value || (v == r.value && t <= r.transform) => Some((v, t)),
                _ => Some((r.value, r.transform)),
            })
    }

    /// Benchmarks carrying a top-1 record, in first-seen order.
    pub fn classification_benchmarks(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.records {
            if r.metric == MetricKind::Top1 && !names.contains(&r.benchmark.as_str()) {
                names.push(&r.benchmark);
            }
        }
        names
    }

    /// Mean of the best top-1 of every classification benchmark.
    pub fn average_top1(&self) -> Option<f64> {
        let names = self.classification_benchmarks();
        if names.is_empty() {
            return None;
        }
        let total: f64 = names.iter().filter_map(|n| self.top1(n)).map(|(v, _)| v).sum();
        Some(total / names.len() as f64)
    }

    /// Mean of every recall recorded for a benchmark, both directions.
    pub fn mean_recall(&self, benchmark: &str) -> Option<f64> {
        let recalls: Vec<f64> = self
            .records
            .iter()
            .filter(|r| {
                r.benchmark == benchmark && matches!(r.metric, MetricKind::ImageToTextRecall | MetricKind::TextToImageRecall)
            })
            .map(|r| r.value)
            .collect();
        (!recalls.is_empty()).then(|| mean_recall(&recalls))
    }
}

/// `(mean(variants), anchor − mean(variants))`.
pub fn robustness_gap(anchor: f64, variants: &[f64]) -> Result<(f64, f64)> {
    if variants.is_empty() {
        bail!(Input, "robustness gap needs at least one variant");
    }
    let avg = variants.iter().sum::<f64>() / variants.len() as f64;
    Ok((avg, anchor - avg))
}

/// Robustness gap from the top-1 records of a report.
pub fn robustness_delta(report: &EvalReport, anchor: &str, variants: &[&str]) -> Result<(f64, f64)> {
    let fetch = |name: &str| -> Result<f64> {
        match report.top1(name) {
            Some((v, _)) => Ok(v),
            None => bail!(Input, "benchmark `{name}` missing from report"),
        }
    };
    let a = fetch(anchor)?;
    let vs = variants.iter().map(|n| fetch(n)).collect::<Result<Vec<_>>>()?;
    robustness_gap(a, &vs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn rec(b: &str, m: MetricKind, v: f64, t: Option<TransformMode>) -> MetricRecord {
        MetricRecord { benchmark: b.to_string(), metric: m, k: None, transform: t, value: v }
    }

    #[test]
    fn best_transform_is_selected() {
        let mut r = EvalReport::default();
        r.push(rec("a", MetricKind::Top1, 50.0, Some(TransformMode::DirectResize)));
        r.push(rec("a", MetricKind::Top1, 60.0, Some(TransformMode::ShortestSideCenterCrop)));
        r.push(rec("b", MetricKind::Top1, 70.0, None));
        assert_eq!(r.top1("a"), Some((60.0, Some(TransformMode::ShortestSideCenterCrop))));
        assert_eq!(r.average_top1(), Some(65.0));
    }

    #[test]
    fn missing_benchmark_is_input_error() {
        let mut r = EvalReport::default();
        r.push(rec("a", MetricKind::Top1, 50.0, None));
        assert!(matches!(robustness_delta(&r, "a", &["a", "z"]), Err(crate::Error::Input(m)) if m.contains('z')));
    }

    #[test]
    fn equal_accuracies_have_no_gap() {
        assert_eq!(robustness_gap(42.0, &[42.0; 6]).unwrap(), (42.0, 0.0));
    }
}
