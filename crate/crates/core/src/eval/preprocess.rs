use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// How an image is brought to a square input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    /// Resize straight to `size × size`, ignoring aspect ratio.
    DirectResize,
    /// Scale so the shorter side becomes `size`, then crop the centre.
    ShortestSideCenterCrop,
}

impl TransformMode {
    pub fn name(self) -> &'static str {
        match self {
            TransformMode::DirectResize => "direct_resize",
            TransformMode::ShortestSideCenterCrop => "shortest_side_center_crop",
        }
    }
}

/// Area-scale range for the training-time random resized crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropScale {
    pub min: f64,
    pub max: f64,
}

impl Default for CropScale {
    fn default() -> Self {
        Self { min: 0.9, max: 1.0 }
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 {
        bail!(Dimension, "image must be [c, H, W], got {:?}", s);
    }
    if s.iter().any(|&d| d == 0) {
        bail!(Input, "degenerate image {:?}", s);
    }
    Ok((s[0], s[1], s[2]))
}

fn axis_taps(in_len: usize, out_len: usize, offset: usize, span: usize) -> Vec<(usize, usize, f64)> {
    let scale = span as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (span - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(span - 1);
            let w = src - lo as f64;
            debug_assert!(offset + hi < in_len);
            (offset + lo, offset + hi, w)
        })
        .collect()
}

/// Bilinear resampling of the window `[y0, y0+h) × [x0, x0+w)` to
/// `out_h × out_w`, sampling at pixel centres with edge clamping.
fn resample(image: &Tensor, window: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, ih, iw) = dims(image)?;
    let (y0, x0, h, w) = window;
    let ys = axis_taps(ih, out_h, y0, h);
    let xs = axis_taps(iw, out_w, x0, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * ih * iw..(ch + 1) * ih * iw];
        for &(ya, yb, wy) in &ys {
            for &(xa, xb, wx) in &xs {
                let top = plane[ya * iw + xa] * (1.0 - wx) + plane[ya * iw + xb] * wx;
                let bottom = plane[yb * iw + xa] * (1.0 - wx) + plane[yb * iw + xb] * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Tensor::new(alloc::vec![c, out_h, out_w], out)
}

/// Bilinear resize of a `[c, H, W]` image.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    if out_h == 0 || out_w == 0 {
        bail!(Input, "cannot resize to {out_h}x{out_w}");
    }
    resample(image, (0, 0, h, w), out_h, out_w)
}

/// Central `size × size` window of a `[c, H, W]` image.
pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if size > h || size > w {
        bail!(Dimension, "crop {size} exceeds image {h}x{w}");
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let row = (ch * h + top + y) * w + left;
            out.extend_from_slice(&src[row..row + size]);
        }
    }
    Tensor::new(alloc::vec![c, size, size], out)
}

/// Picks a crop window covering an area fraction in `scale` with an aspect
/// ratio drawn log-uniformly from [3/4, 4/3]. After ten rejected draws it
/// falls back to the largest central window whose aspect ratio is in range.
pub fn random_crop_window<R: Rng + ?Sized>(h: usize, w: usize, scale: CropScale, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr_lo, lr_hi) = (libm::log(3.0 / 4.0), libm::log(4.0 / 3.0));
    for _ in 0..10 {
        let target = area * rng.random_range(scale.min..=scale.max);
        let ratio = libm::exp(rng.random_range(lr_lo..=lr_hi));
        let cw = libm::round(libm::sqrt(target * ratio)) as usize;
        let ch = libm::round(libm::sqrt(target / ratio)) as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < 3.0 / 4.0 {
        ((libm::round(w as f64 * 4.0 / 3.0) as usize).min(h), w)
    } else if in_ratio > 4.0 / 3.0 {
        (h, (libm::round(h as f64 * 4.0 / 3.0) as usize).min(w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Brings a `[c, H, W]` image to `[c, size, size]`. With `augment`, a random
/// resized crop replaces the deterministic transform.
pub fn preprocess<R: Rng + ?Sized>(
    image: &Tensor,
    mode: TransformMode,
    size: usize,
    augment: Option<(CropScale, &mut R)>,
) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    if size == 0 {
        bail!(Input, "target size must be positive");
    }
    if let Some((scale, rng)) = augment {
        if !(scale.min > 0.0 && scale.min <= scale.max && scale.max <= 1.0) {
            bail!(Config, "crop scale range ({}, {}) must lie in (0, 1]", scale.min, scale.max);
        }
        let window = random_crop_window(h, w, scale, rng);
        return resample(image, window, size, size);
    }
    match mode {
        TransformMode::DirectResize => resize_bilinear(image, size, size),
        TransformMode::ShortestSideCenterCrop => {
            let (nh, nw) = shortest_side_dims(h, w, size);
            center_crop(&resize_bilinear(image, nh, nw)?, size)
        }
    }
}

/// Deterministic transform of one image.
pub fn preprocess_eval(image: &Tensor, mode: TransformMode, size: usize) -> Result<Tensor> {
    preprocess::<rand_chacha::ChaCha8Rng>(image, mode, size, None)
}

/// Resized dimensions with the shorter side mapped to exactly `size`.
pub fn shortest_side_dims(h: usize, w: usize, size: usize) -> (usize, usize) {
    if h <= w {
        (size, (libm::round(w as f64 * size as f64 / h as f64) as usize).max(size))
    } else {
        ((libm::round(h as f64 * size as f64 / w as f64) as usize).max(size), size)
    }
}

/// Applies [`preprocess_eval`] to every image of a `[b, c, H, W]` batch.
pub fn preprocess_batch(images: &Tensor, mode: TransformMode, size: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        bail!(Dimension, "image batch must be [b, c, H, W], got {:?}", s);
    }
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * s[1] * size * size);
    for i in 0..s[0] {
        let one = Tensor::new(alloc::vec![s[1], s[2], s[3]], images.data()[i * per..(i + 1) * per].to_vec())?;
        out.extend_from_slice(preprocess_eval(&one, mode, size)?.data());
    }
    Tensor::new(alloc::vec![s[0], s[1], size, size], out)
}
