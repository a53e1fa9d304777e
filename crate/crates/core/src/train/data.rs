use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{bail, Result};
use crate::eval::{random_crop_window, resize_bilinear, CropScale};
use crate::tensor::Tensor;

/// Images with their tokenised captions and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    /// `[n, c, H, W]`.
    pub images: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl PairDataset {
    pub fn new(images: Tensor, tokens: Vec<Vec<usize>>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            bail!(Dimension, "dataset images must be [n, c, H, W], got {:?}", images.shape());
        }
        let n = images.shape()[0];
        if tokens.len() != n || labels.len() != n {
            bail!(Dimension, "{n} images, {} captions, {} labels", tokens.len(), labels.len());
        }
        Ok(Self { images, tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            tokens: indices.iter().map(|&i| self.tokens[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Named training splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sets: BTreeMap<String, PairDataset>,
}

impl Corpus {
    pub fn single(name: &str, set: PairDataset) -> Self {
        Self { sets: BTreeMap::from([(String::from(name), set)]) }
    }
}

/// A training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// Draws batches from a weighted mix of splits. Each split is walked in
/// reshuffled epochs; the split of every sample is drawn by weight.
pub struct BatchSampler<'a> {
    sets: Vec<&'a PairDataset>,
    weights: Option<WeightedIndex<f64>>,
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a Corpus, mix: &BTreeMap<String, f64>) -> Result<Self> {
        let mut sets = Vec::new();
        let mut w = Vec::new();
        for (name, &weight) in mix {
            let Some(set) = corpus.sets.get(name) else {
                bail!(Input, "data_mix names split `{name}`, which the corpus lacks");
            };
            if set.is_empty() {
                bail!(Input, "split `{name}` is empty");
            }
            sets.push(set);
            w.push(weight);
        }
        if sets.is_empty() {
            bail!(Input, "empty data mix");
        }
        let weights = if sets.len() > 1 {
            Some(WeightedIndex::new(&w).map_err(|e| crate::Error::Config(alloc::format!("data_mix weights: {e}")))?)
        } else {
            None
        };
        let n = sets.len();
        Ok(Self { sets, weights, order: alloc::vec![Vec::new(); n], cursor: alloc::vec![0; n] })
    }

    fn next_index<R: Rng + ?Sized>(&mut self, s: usize, rng: &mut R) -> usize {
        if self.cursor[s] >= self.order[s].len() {
            self.order[s] = (0..self.sets[s].len()).collect();
            self.order[s].shuffle(rng);
            self.cursor[s] = 0;
        }
        let i = self.order[s][self.cursor[s]];
        self.cursor[s] += 1;
        i
    }

    /// Next batch, brought to `resolution` by resizing or by a random
    /// resized crop when `augment` is set.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, resolution: usize, augment: Option<CropScale>, rng: &mut R) -> Result<Batch> {
        let mut picks = Vec::with_capacity(size);
        for _ in 0..size {
            let s = match &self.weights {
                Some(w) => w.sample(rng),
                None => 0,
            };
            let i = self.next_index(s, rng);
            picks.push((s, i));
        }
        let mut data = Vec::new();
        let mut tokens = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        let mut channels = 0;
        for &(s, i) in &picks {
            let set = self.sets[s];
            let shape = set.images.shape();
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            channels = c;
            let per = c * h * w;
            let img = Tensor::new(alloc::vec![c, h, w], set.images.data()[i * per..(i + 1) * per].to_vec())?;
            let img = match augment {
                Some(scale) => {
                    let (top, left, ch, cw) = random_crop_window(h, w, scale, rng);
                    let crop = crop(&img, top, left, ch, cw)?;
                    resize_bilinear(&crop, resolution, resolution)?
                }
                None if h == resolution && w == resolution => img,
                None => resize_bilinear(&img, resolution, resolution)?,
            };
            data.extend_from_slice(img.data());
            tokens.push(set.tokens[i].clone());
            labels.push(set.labels[i]);
        }
        Ok(Batch { images: Tensor::new(alloc::vec![size, channels, resolution, resolution], data)?, tokens, labels })
    }
}

fn crop(img: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    let (c, ih, iw) = (s[0], s[1], s[2]);
    if top + h > ih || left + w > iw {
        bail!(Dimension, "crop window exceeds image");
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * ih + top + y) * iw + left;
            out.extend_from_slice(&img.data()[row..row + w]);
        }
    }
    Tensor::new(alloc::vec![c, h, w], out)
}
