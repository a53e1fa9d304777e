use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{dot, normalize_rows, Tensor};

/// Ground-truth links between images and captions, in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    image_to_texts: Vec<Vec<usize>>,
    text_to_images: Vec<Vec<usize>>,
}

impl Pairing {
    /// Builds the pairing from each image's caption list. Every image needs a
    /// caption and every caption an image.
    pub fn new(image_to_texts: Vec<Vec<usize>>, n_texts: usize) -> Result<Self> {
        if image_to_texts.is_empty() || n_texts == 0 {
            bail!(Input, "empty pairing");
        }
        let mut text_to_images = vec![Vec::new(); n_texts];
        for (i, texts) in image_to_texts.iter().enumerate() {
            if texts.is_empty() {
                bail!(Input, "image {i} has no ground-truth caption");
            }
            for &t in texts {
                if t >= n_texts {
                    bail!(Input, "image {i} refers to caption {t} of {n_texts}");
                }
                text_to_images[t].push(i);
            }
        }
        if let Some(t) = text_to_images.iter().position(Vec::is_empty) {
            bail!(Input, "caption {t} belongs to no image");
        }
        Ok(Self { image_to_texts, text_to_images })
    }

    /// Image `i` matches caption `i`.
    pub fn one_to_one(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| vec![i]).collect(), n)
    }

    /// Caption `t` belongs to image `owners[t]`.
    pub fn from_owners(owners: &[usize], n_images: usize) -> Result<Self> {
        let mut lists = vec![Vec::new(); n_images];
        for (t, &o) in owners.iter().enumerate() {
            if o >= n_images {
                bail!(Input, "caption {t} refers to image {o} of {n_images}");
            }
            lists[o].push(t);
        }
        Self::new(lists, owners.len())
    }

    pub fn image_to_texts(&self) -> &[Vec<usize>] {
        &self.image_to_texts
    }

    pub fn text_to_images(&self) -> &[Vec<usize>] {
        &self.text_to_images
    }
}

/// Recall@K in both directions (percent) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// Image queries ranked over captions.
    pub image_to_text: Vec<f64>,
    /// Caption queries ranked over images.
    pub text_to_image: Vec<f64>,
    pub mean_recall: f64,
}

/// Arithmetic mean of recalls.
pub fn mean_recall(recalls: &[f64]) -> f64 {
    if recalls.is_empty() {
        return f64::NAN;
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Best (0-based) rank among the ground-truth candidates of one query. A
/// candidate outranks another on a higher score, or an equal score and a
/// lower index.
fn best_rank(scores: &[f64], truth: &[usize]) -> usize {
    truth
        .iter()
        .map(|&g| {
            scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > scores[g] || (s == scores[g] && j < g))
                .count()
        })
        .min()
        .unwrap_or(usize::MAX)
}

fn recalls(scores: &[Vec<f64>], truth: &[Vec<usize>], ks: &[usize]) -> Vec<f64> {
    let ranks: Vec<usize> = scores.iter().zip(truth).map(|(s, t)| best_rank(s, t)).collect();
    ks.iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Cosine-ranked retrieval in both directions.
pub fn eval_retrieval(images: &Tensor, texts: &Tensor, pairing: &Pairing, ks: &[usize]) -> Result<RetrievalReport> {
    if images.rank() != 2 || texts.rank() != 2 || images.shape()[1] != texts.shape()[1] {
        bail!(Dimension, "retrieval embeddings {:?} vs {:?}", images.shape(), texts.shape());
    }
    let (n, m, d) = (images.shape()[0], texts.shape()[0], images.shape()[1]);
    if pairing.image_to_texts().len() != n || pairing.text_to_images().len() != m {
        bail!(Input, "pairing covers {}x{} but embeddings are {n}x{m}", pairing.image_to_texts().len(), pairing.text_to_images().len());
    }
    if ks.is_empty() || ks.contains(&0) {
        bail!(Config, "recall cut-offs must be positive, got {:?}", ks);
    }
    if !images.is_finite() || !texts.is_finite() {
        bail!(Numeric, "retrieval embeddings contain non-finite values");
    }
    let (x, y) = (normalize_rows(images)?, normalize_rows(texts)?);
    let sim: Vec<Vec<f64>> = x.data().chunks(d).map(|a| y.data().chunks(d).map(|b| dot(a, b)).collect()).collect();
    let sim_t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| sim[i][j]).collect()).collect();
    let i2t = recalls(&sim, pairing.image_to_texts(), ks);
    let t2i = recalls(&sim_t, pairing.text_to_images(), ks);
    let all: Vec<f64> = i2t.iter().chain(&t2i).copied().collect();
    Ok(RetrievalReport { ks: ks.to_vec(), image_to_text: i2t, text_to_image: t2i, mean_recall: mean_recall(&all) })
}
