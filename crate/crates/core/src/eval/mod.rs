//! Zero-shot classification, retrieval, video averaging, robustness gaps,
//! linear probing and the two evaluation transforms.

mod benchmark;
mod preprocess;
mod probe;
mod report;
mod retrieval;
mod video;
mod zero_shot;

pub use preprocess::{
    center_crop, preprocess, preprocess_batch, preprocess_eval, random_crop_window, resize_bilinear, shortest_side_dims,
    CropScale, TransformMode,
};
pub use benchmark::{embed_images, embed_texts, ZeroShotBenchmark, EVAL_CHUNK};
pub use probe::{linear_probe, ProbeResult, ProbeSplit};
pub use report::{robustness_delta, robustness_gap, EvalReport, MetricKind, MetricRecord};
pub use retrieval::{eval_retrieval, mean_recall, Pairing, RetrievalReport};
pub use video::{frame_indices, video_embed, video_embed_with, video_metric, VideoEmbedding, VideoMetric};
pub use zero_shot::{
    build_zero_shot_classifier, classify_zero_shot, top_k, zero_shot_scores, ClassifyResult, PromptTemplateSet,
    Tokenizer, ZeroShotClassifier, DEFAULT_TEMPLATES,
};
