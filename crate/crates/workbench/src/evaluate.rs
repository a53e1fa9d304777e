//! Runs an evaluation manifest against a model.

use rayon::prelude::*;

use clipladder_core::eval::{
    build_zero_shot_classifier, classify_zero_shot, embed_images, embed_texts, eval_retrieval, linear_probe,
    robustness_delta, video_embed_with, video_metric, EvalReport, MetricKind, MetricRecord, Pairing, ProbeSplit,
    PromptTemplateSet, TransformMode, ZeroShotClassifier, EVAL_CHUNK,
};
use clipladder_core::model::{ClipModel, TowerInput};
use clipladder_core::tensor::Tensor;

use crate::config::{BenchmarkSpec, EvalManifest};
use crate::corpus::EVAL_TEMPLATES;
use crate::dataset::CorpusDir;
use crate::error::{Error, Result};
use crate::tokenizer::WordTokenizer;

/// Runs `f` on a pool of `threads` workers, or inline for one thread.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

/// Image embeddings computed chunk by chunk in parallel. Chunks are
/// independent and reassembled in order, so the result does not depend on
/// the thread count.
pub fn par_embed_images(model: &ClipModel, images: &Tensor, transform: TransformMode) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| embed_images(model, &images.slice_rows(s, (s + EVAL_CHUNK).min(n))?, transform))
        .collect::<clipladder_core::Result<Vec<_>>>()?;
    Ok(Tensor::stack_rows(&parts)?)
}

/// Text context length of the model's text tower.
pub fn context_length(model: &ClipModel) -> Result<usize> {
    match model.config.text.input {
        TowerInput::Text { context_length, .. } => Ok(context_length),
        TowerInput::Vision { .. } => Err(Error::config("model text tower is not a text tower")),
    }
}

pub fn classifier(
    model: &ClipModel,
    class_names: &[String],
    templates: &PromptTemplateSet,
    tokenizer: &WordTokenizer,
) -> Result<ZeroShotClassifier> {
    Ok(build_zero_shot_classifier(class_names, templates, tokenizer, |rows| embed_texts(model, rows))?)
}

fn record(benchmark: &str, metric: MetricKind, k: Option<usize>, transform: Option<TransformMode>, value: f64) -> MetricRecord {
    MetricRecord { benchmark: benchmark.to_string(), metric, k, transform, value }
}

/// Report of a manifest plus the robustness gap `(variant average, Δ)` when
/// the manifest asks for one.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub robustness: Option<(f64, f64)>,
}

pub fn run_manifest(model: &ClipModel, manifest: &EvalManifest, corpus: &CorpusDir, threads: usize) -> Result<EvalOutcome> {
    manifest.validate()?;
    let tokenizer = corpus.tokenizer(context_length(model)?)?;
    let class_names = corpus.class_names();
    let default_templates = PromptTemplateSet::new(&EVAL_TEMPLATES)?;
    let mut report = EvalReport::default();
    with_threads(threads, || -> Result<()> {
        for b in &manifest.benchmarks {
            match b {
                BenchmarkSpec::ZeroShot { name, split, transforms, templates } => {
                    let templates = match templates {
                        Some(t) => PromptTemplateSet::new(t)?,
                        None => default_templates.clone(),
                    };
                    let clf = classifier(model, &class_names, &templates, &tokenizer)?;
                    let data = corpus.read_split(split)?;
                    for &t in transforms {
                        let emb = par_embed_images(model, &data.images, t)?;
                        let r = classify_zero_shot(&emb, &clf, &data.labels)?;
                        report.push(record(name, MetricKind::Top1, None, Some(t), 100.0 * r.top1));
                        report.push(record(name, MetricKind::Top5, Some(r.top5_k), Some(t), 100.0 * r.top5));
                    }
                }
                BenchmarkSpec::Retrieval { name, split, ks } => {
                    let data = corpus.read_split(split)?;
                    let images = par_embed_images(model, &data.images, TransformMode::DirectResize)?;
                    let tokens: Vec<Vec<usize>> = data.captions.iter().map(|c| tokenizer.tokenize(c)).collect();
                    let texts = embed_texts(model, &tokens)?;
                    let r = eval_retrieval(&images, &texts, &Pairing::one_to_one(data.labels.len())?, ks)?;
                    for (i, &k) in r.ks.iter().enumerate() {
                        report.push(record(name, MetricKind::ImageToTextRecall, Some(k), None, r.image_to_text[i]));
                        report.push(record(name, MetricKind::TextToImageRecall, Some(k), None, r.text_to_image[i]));
                    }
                    report.push(record(name, MetricKind::MeanRecall, None, None, r.mean_recall));
                }
                BenchmarkSpec::Video { name, split, frames, metric } => {
                    let data = corpus.read_split(split)?;
                    let s = data.images.shape().to_vec();
                    if s.len() != 5 {
                        return Err(Error::Format(format!("split `{split}` is not a video split (shape {s:?})")));
                    }
                    let clf = classifier(model, &class_names, &default_templates, &tokenizer)?;
                    let clips = (0..s[0])
                        .into_par_iter()
                        .map(|i| -> Result<Tensor> {
                            let clip = data.images.select_rows(&[i])?.reshape(&s[1..])?;
                            let v = video_embed_with(&clip, *frames, |f| embed_images(model, f, TransformMode::DirectResize))?;
                            let d = v.embedding.numel();
                            Ok(v.embedding.reshape(&[1, d])?)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let r = classify_zero_shot(&Tensor::stack_rows(&clips)?, &clf, &data.labels)?;
                    report.push(record(name, MetricKind::Top1, None, None, 100.0 * r.top1));
                    report.push(record(name, MetricKind::Top5, Some(r.top5_k), None, 100.0 * r.top5));
                    report.push(record(name, MetricKind::VideoScore, None, None, 100.0 * video_metric(r.top1, r.top5, *metric)));
                }
                BenchmarkSpec::LinearProbe { name, train_split, test_split, l2, iterations } => {
                    let train = corpus.read_split(train_split)?;
                    let test = corpus.read_split(test_split)?;
                    let a = par_embed_images(model, &train.images, TransformMode::DirectResize)?;
                    let b = par_embed_images(model, &test.images, TransformMode::DirectResize)?;
                    let feats = Tensor::stack_rows(&[a, b])?;
                    let labels: Vec<usize> = train.labels.iter().chain(&test.labels).copied().collect();
                    let n = train.labels.len();
                    let split = ProbeSplit { train: (0..n).collect(), test: (n..labels.len()).collect() };
                    let r = linear_probe(&feats, &labels, &split, *l2, *iterations)?;
                    report.push(record(name, MetricKind::LinearProbeTop1, None, None, 100.0 * r.accuracy));
                }
            }
        }
        Ok(())
    })??;
    let robustness = match &manifest.robustness {
        Some(r) => {
            let variants: Vec<&str> = r.variants.iter().map(String::as_str).collect();
            Some(robustness_delta(&report, &r.anchor, &variants)?)
        }
        None => None,
    };
    Ok(EvalOutcome { report: report.sorted(), robustness })
}
