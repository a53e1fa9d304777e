//! Procedural captioned shapes.
//!
//! Every image holds one coloured shape on a textured background. The label
//! is the shape; every caption names it, some also mention colour, size
//! or texture. All randomness comes from ChaCha8 streams keyed by the spec seed
//! and the split name, so a spec fully determines the corpus.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use clipladder_core::error::{Error, Result};
use clipladder_core::tensor::Tensor;
use clipladder_core::train::{derive_seed, PairDataset};

use crate::tokenizer::WordTokenizer;

pub const SHAPES: [&str; 10] = ["circle", "square", "triangle", "diamond", "ring", "plus", "cross", "star", "hexagon", "crescent"];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.12, 0.1]),
    ("green", [0.12, 0.78, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.12]),
    ("purple", [0.6, 0.2, 0.8]),
    ("orange", [1.0, 0.55, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("cyan", [0.1, 0.85, 0.9]),
];

pub const TEXTURES: [&str; 5] = ["plain", "striped", "dotted", "checkered", "noisy"];

/// Caption patterns; `{c}` colour, `{s}` shape, `{t}` texture, `{z}` size.
/// Every pattern names the shape while the other attributes appear only
/// now and then, so shape stays the one cue shared by all captions.
const CAPTIONS: [&str; 6] = [
    "a photo of a {s}",
    "a {c} {s}",
    "a {z} {s}",
    "a {s} on a {t} background",
    "the {s} is {c}",
    "a picture of a {s}",
];

/// Prompts for zero-shot evaluation on this corpus.
pub const EVAL_TEMPLATES: [&str; 4] = ["a photo of a {}.", "a picture of a {}.", "a {} on a background.", "the {}."];

const EXTRA_WORDS: [&str; 17] = [
    "a", "the", "of", "on", "in", "over", "is", "photo", "picture", "background", "pattern", "small", "large", "shape",
    "drawing", "an", "and",
];

/// Every word the grammar and the evaluation prompts use.
pub fn vocabulary() -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let all = EXTRA_WORDS
        .iter()
        .copied()
        .chain(SHAPES)
        .chain(COLORS.iter().map(|c| c.0))
        .chain(TEXTURES);
    for w in all {
        if seen.insert(w) {
            out.push(w.to_string());
        }
    }
    out
}

/// Distribution-shifted copies of the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Noisy,
    Inverted,
    Dim,
    Blurred,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Noisy, Variant::Inverted, Variant::Dim, Variant::Blurred];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Noisy => "noisy",
            Variant::Inverted => "inverted",
            Variant::Dim => "dim",
            Variant::Blurred => "blurred",
        }
    }
}

fn default_image_size() -> usize {
    32
}
fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_frames() -> usize {
    16
}

/// Corpus recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    /// Number of colours drawn from the palette (at most 8).
    #[serde(default = "default_colors")]
    pub colors: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Shifted copies of the test split used for robustness gaps.
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Moving-shape clips for video evaluation; 0 disables them.
    #[serde(default)]
    pub video_clips: usize,
    #[serde(default = "default_frames")]
    pub video_frames: usize,
}

fn default_colors() -> usize {
    COLORS.len()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > SHAPES.len() {
            return Err(Error::Config(format!("classes must lie in 2..={}, got {}", SHAPES.len(), self.classes)));
        }
        if self.colors == 0 || self.colors > COLORS.len() {
            return Err(Error::Config(format!("colors must lie in 1..={}, got {}", COLORS.len(), self.colors)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if self.video_clips > 0 && self.video_frames == 0 {
            return Err(Error::Config("video_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPES[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

/// Drawing parameters of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub shape: usize,
    pub color: usize,
    pub texture: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
    pub background: f64,
    pub tint: [f64; 3],
    pub phase: f64,
    pub caption_form: usize,
}

impl Scene {
    fn sample<R: Rng + ?Sized>(shape: usize, colors: usize, rng: &mut R) -> Self {
        Self {
            shape,
            color: rng.random_range(0..colors),
            texture: rng.random_range(0..TEXTURES.len()),
            cx: rng.random_range(-0.08..=0.08),
            cy: rng.random_range(-0.08..=0.08),
            radius: rng.random_range(0.38..=0.62),
            angle: rng.random_range(-0.26..=0.26),
            background: rng.random_range(0.12..=0.42),
            tint: [rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05)],
            phase: rng.random_range(0.0..1.0),
            caption_form: rng.random_range(0..CAPTIONS.len()),
        }
    }

    pub fn caption(&self) -> String {
        let size = if self.radius < 0.5 { "small" } else { "large" };
        CAPTIONS[self.caption_form]
            .replace("{c}", COLORS[self.color].0)
            .replace("{s}", SHAPES[self.shape])
            .replace("{t}", TEXTURES[self.texture])
            .replace("{z}", size)
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let rho = (u * u + v * v).sqrt();
    let phi = v.atan2(u);
    match shape {
        0 => rho <= 0.9,
        1 => u.abs().max(v.abs()) <= 0.72,
        2 => (0..3).all(|k| {
            let a = -PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
            u * a.cos() + v * a.sin() <= 0.45
        }),
        3 => u.abs() + v.abs() <= 0.95,
        4 => (0.52..=0.95).contains(&rho),
        5 => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
        6 => {
            let (a, b) = ((u + v) / 2f64.sqrt(), (v - u) / 2f64.sqrt());
            (a.abs() <= 0.24 && b.abs() <= 0.95) || (b.abs() <= 0.24 && a.abs() <= 0.95)
        }
        7 => rho <= 0.45 + 0.5 * ((phi + PI / 2.0) * 5.0).cos().max(0.0).powi(2),
        8 => (0..3).all(|k| {
            let a = k as f64 * PI / 3.0;
            (u * a.cos() + v * a.sin()).abs() <= 0.8
        }),
        9 => rho <= 0.95 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.75,
        _ => false,
    }
}

fn texture_value(texture: usize, x: f64, y: f64, phase: f64, noise: f64) -> f64 {
    match texture {
        0 => 0.0,
        1 => {
            if ((x * 4.0 + phase) * PI).sin() > 0.0 {
                0.14
            } else {
                -0.14
            }
        }
        2 => {
            let fx = (x * 3.0 + phase).rem_euclid(1.0) - 0.5;
            let fy = (y * 3.0 + phase).rem_euclid(1.0) - 0.5;
            if fx * fx + fy * fy < 0.06 {
                0.18
            } else {
                -0.04
            }
        }
        3 => {
            let a = ((x + 1.0) * 3.0 + phase).floor() as i64;
            let b = ((y + 1.0) * 3.0).floor() as i64;
            if (a + b).rem_euclid(2) == 0 {
                0.12
            } else {
                -0.12
            }
        }
        _ => noise,
    }
}

/// Renders a scene to `[3, size, size]` in `[0, 1]`, 2×2 supersampled.
/// `shift` moves the shape (used for video clips).
pub fn render<R: Rng + ?Sized>(scene: &Scene, size: usize, shift: (f64, f64), rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    let (sa, ca) = scene.angle.sin_cos();
    let color = COLORS[scene.color].1;
    let normal = Normal::new(0.0, 0.08).expect("valid sigma");
    for py in 0..size {
        for px in 0..size {
            let noise = normal.sample(rng);
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let x = (px as f64 + ox) / size as f64 * 2.0 - 1.0;
                let y = (py as f64 + oy) / size as f64 * 2.0 - 1.0;
                let (dx, dy) = (x - scene.cx - shift.0, y - scene.cy - shift.1);
                let u = (dx * ca + dy * sa) / scene.radius;
                let v = (-dx * sa + dy * ca) / scene.radius;
                if inside(scene.shape, u, v) {
                    cover += 0.25;
                }
            }
            let x = px as f64 / size as f64 * 2.0 - 1.0;
            let y = py as f64 / size as f64 * 2.0 - 1.0;
            let bg = (scene.background + texture_value(scene.texture, x, y, scene.phase, noise)).clamp(0.0, 1.0);
            for c in 0..3 {
                let fg = (color[c] + scene.tint[c]).clamp(0.0, 1.0);
                out[(c * size + py) * size + px] = cover * fg + (1.0 - cover) * bg;
            }
        }
    }
    out
}

/// One generated split held in memory with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    /// `[n, 3, size, size]`, or `[n, frames, 3, size, size]` for video.
    pub images: Tensor,
    pub captions: Vec<String>,
    pub labels: Vec<usize>,
}

impl Split {
    /// Tokenised pairs for training or evaluation; video splits are rejected.
    pub fn to_pair_dataset(&self, tokenizer: &WordTokenizer) -> Result<PairDataset> {
        let tokens = self.captions.iter().map(|c| tokenizer.tokenize(c)).collect();
        PairDataset::new(self.images.clone(), tokens, self.labels.clone())
    }
}

/// Tokenizer over [`vocabulary`].
pub fn synthetic_tokenizer(context_length: usize) -> Result<WordTokenizer> {
    WordTokenizer::new(&vocabulary(), context_length)
}

fn stratified_labels<R: Rng + ?Sized>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round().clamp(0.0, 255.0) / 255.0
}

fn generate_split(spec: &SyntheticSpec, name: &str, n: usize) -> Result<(Split, Vec<Scene>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("split/{name}")));
    let labels = stratified_labels(n, spec.classes, &mut rng);
    let s = spec.image_size;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut scenes = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for &label in &labels {
        let scene = Scene::sample(label, spec.colors, &mut rng);
        data.extend(render(&scene, s, (0.0, 0.0), &mut rng).into_iter().map(quantize));
        captions.push(scene.caption());
        scenes.push(scene);
    }
    let images = Tensor::new(vec![n, 3, s, s], data)?;
    Ok((Split { name: name.to_string(), images, captions, labels }, scenes))
}

fn apply_variant(variant: Variant, base: &Split, size: usize, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("variant/{}", variant.name())));
    let normal = Normal::new(0.0, 0.15).expect("valid sigma");
    let src = base.images.data();
    let plane = size * size;
    let data: Vec<f64> = match variant {
        Variant::Noisy => src.iter().map(|v| quantize((v + normal.sample(&mut rng)).clamp(0.0, 1.0))).collect(),
        Variant::Inverted => src.iter().map(|v| quantize(1.0 - v)).collect(),
        Variant::Dim => src.iter().map(|v| quantize(v * 0.55)).collect(),
        Variant::Blurred => {
            let mut out = vec![0.0; src.len()];
            for (p, chunk) in src.chunks(plane).enumerate() {
                for y in 0..size {
                    for x in 0..size {
                        let (mut acc, mut cnt) = (0.0, 0.0);
                        for yy in y.saturating_sub(1)..(y + 2).min(size) {
                            for xx in x.saturating_sub(1)..(x + 2).min(size) {
                                acc += chunk[yy * size + xx];
                                cnt += 1.0;
                            }
                        }
                        out[p * plane + y * size + x] = quantize(acc / cnt);
                    }
                }
            }
            out
        }
    };
    Ok(Split {
        name: format!("test_{}", variant.name()),
        images: Tensor::new(base.images.shape().to_vec(), data)?,
        captions: base.captions.clone(),
        labels: base.labels.clone(),
    })
}

fn generate_video(spec: &SyntheticSpec) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split/video"));
    let n = spec.video_clips;
    let (s, f) = (spec.image_size, spec.video_frames);
    let labels = stratified_labels(n, spec.classes, &mut rng);
    let mut data = Vec::with_capacity(n * f * 3 * s * s);
    let mut captions = Vec::with_capacity(n);
    for &label in &labels {
        let scene = Scene::sample(label, spec.colors, &mut rng);
        let (vx, vy): (f64, f64) = (rng.random_range(-0.02..=0.02), rng.random_range(-0.02..=0.02));
        for t in 0..f {
            let dt = t as f64 - (f as f64 - 1.0) / 2.0;
            data.extend(render(&scene, s, (vx * dt, vy * dt), &mut rng).into_iter().map(quantize));
        }
        captions.push(scene.caption());
    }
    Ok(Split { name: "video".into(), images: Tensor::new(vec![n, f, 3, s, s], data)?, captions, labels })
}

/// Generates train, val, test, the test variants and the optional video
/// split, in that order.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (name, n) in [("train", spec.train), ("val", spec.val), ("test", spec.test)] {
        if n > 0 {
            out.push(generate_split(spec, name, n)?.0);
        }
    }
    let test = out.iter().find(|s| s.name == "test").cloned().expect("test split generated");
    for &v in &spec.variants {
        out.push(apply_variant(v, &test, spec.image_size, spec.seed)?);
    }
    if spec.video_clips > 0 {
        out.push(generate_video(spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 5,
            classes: 10,
            colors: 8,
            image_size: 16,
            train: 23,
            val: 0,
            test: 10,
            variants: vec![Variant::Blurred],
            video_clips: 2,
            video_frames: 3,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_synthetic_corpus(&spec()).unwrap(), generate_synthetic_corpus(&spec()).unwrap());
    }

    #[test]
    fn class_histogram_is_flat() {
        let c = generate_synthetic_corpus(&spec()).unwrap();
        let mut hist = [0usize; 10];
        c[0].labels.iter().for_each(|&l| hist[l] += 1);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }

    #[test]
    fn every_shape_is_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for shape in 0..SHAPES.len() {
            let scene = Scene { shape, radius: 0.5, cx: 0.0, cy: 0.0, angle: 0.0, ..Scene::sample(shape, 8, &mut rng) };
            let px = render(&scene, 16, (0.0, 0.0), &mut rng);
            let fg = COLORS[scene.color].1[0] + scene.tint[0];
            assert!(px[..256].iter().any(|&v| (v - fg.clamp(0.0, 1.0)).abs() < 1e-9), "{}", SHAPES[shape]);
        }
    }

    #[test]
    fn captions_use_only_vocabulary_words() {
        let vocab = vocabulary();
        let c = generate_synthetic_corpus(&spec()).unwrap();
        for cap in &c[0].captions {
            for w in cap.split_whitespace() {
                assert!(vocab.iter().any(|v| v == w), "{w}");
            }
        }
    }

    #[test]
    fn too_many_classes_rejected() {
        let s = SyntheticSpec { classes: 11, ..spec() };
        assert!(matches!(generate_synthetic_corpus(&s), Err(Error::Config(_))));
    }
}
