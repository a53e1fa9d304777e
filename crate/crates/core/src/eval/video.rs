use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{encode_image, TowerConfig, TowerWeights};
use crate::tensor::{normalize_rows, Tensor};

/// Frame indices `⌊(i + ½)·f / n⌋` for `i < n`; with `n = 1` this is the
/// middle frame. The flag is set when `n > f` forces repeated indices.
pub fn frame_indices(frames: usize, n_sample: usize) -> Result<(Vec<usize>, bool)> {
    if frames == 0 {
        bail!(Input, "video has no frames");
    }
    if n_sample == 0 {
        bail!(Config, "n_sample must be positive");
    }
    let idx = (0..n_sample).map(|i| ((2 * i + 1) * frames) / (2 * n_sample)).collect();
    Ok((idx, n_sample > frames))
}

/// Averaged, normalised clip embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub embedding: Tensor,
    pub indices: Vec<usize>,
    pub repeated: bool,
}

/// Samples frames of `[f, c, H, W]`, embeds them with `encode` (frames to
/// `[n, d]`), averages the rows and normalises.
pub fn video_embed_with<F>(frames: &Tensor, n_sample: usize, encode: F) -> Result<VideoEmbedding>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    if frames.rank() != 4 {
        bail!(Dimension, "video must be [f, c, H, W], got {:?}", frames.shape());
    }
    let (indices, repeated) = frame_indices(frames.shape()[0], n_sample)?;
    let emb = encode(&frames.select_rows(&indices)?)?;
    if emb.rank() != 2 || emb.shape()[0] != indices.len() {
        bail!(Dimension, "frame embeddings {:?} for {} frames", emb.shape(), indices.len());
    }
    let d = emb.shape()[1];
    let mut mean = alloc::vec![0.0; d];
    for row in emb.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = indices.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let embedding = normalize_rows(&Tensor::new(alloc::vec![1, d], mean)?)?.reshape(&[d])?;
    Ok(VideoEmbedding { embedding, indices, repeated })
}

/// Mean of the projected class-token embeddings of sampled frames, normalised.
pub fn video_embed(weights: &TowerWeights, config: &TowerConfig, frames: &Tensor, n_sample: usize) -> Result<VideoEmbedding> {
    video_embed_with(frames, n_sample, |f| encode_image(weights, config, f, None))
}

/// Headline metric of a video benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoMetric {
    Top1,
    MeanTop1Top5,
}

pub fn video_metric(top1: f64, top5: f64, kind: VideoMetric) -> f64 {
    match kind {
        VideoMetric::Top1 => top1,
        VideoMetric::MeanTop1Top5 => (top1 + top5) / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_rule() {
        assert_eq!(frame_indices(8, 8).unwrap().0, (0..8).collect::<Vec<_>>());
        assert_eq!(frame_indices(16, 8).unwrap().0, alloc::vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(frame_indices(7, 1).unwrap().0, alloc::vec![3]);
        let (idx, flagged) = frame_indices(2, 8).unwrap();
        assert!(flagged && idx.iter().all(|&i| i < 2));
    }

    #[test]
    fn metric_kinds() {
        assert!((video_metric(0.8, 1.0, VideoMetric::MeanTop1Top5) - 0.9).abs() < 1e-15);
        assert_eq!(video_metric(0.3, 0.3, VideoMetric::MeanTop1Top5), 0.3);
        assert_eq!(video_metric(0.3, 0.9, VideoMetric::Top1), 0.3);
    }
}
