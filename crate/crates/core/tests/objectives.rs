//! Contrastive and distillation losses, patch masks and patch dropout.

use clipladder_core::model::{build_tower, encode_image, TowerConfig};
use clipladder_core::objectives::{
    contrastive_loss, distillation_loss, dropped_for_ratio, sample_patch_mask, ContrastiveBatch, PatchMask,
};
use clipladder_core::tensor::{Tape, Tensor};
use clipladder_core::train::apply_patch_dropout;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn loss(images: Tensor, texts: Tensor, tau: f64) -> f64 {
    contrastive_loss(&ContrastiveBatch { image_embeddings: images, text_embeddings: texts, temperature: tau }).unwrap().0
}

#[test]
pub fn batch_of_one_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let l = loss(random(&mut rng, &[1, 7]), random(&mut rng, &[1, 7]), 0.01);
        assert_eq!(l, 0.0);
    }
}

#[test]
pub fn orthonormal_pair_of_two_at_unit_temperature() {
    let e = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((loss(e.clone(), e, 1.0) - expected).abs() < 1e-9);
}

#[test]
pub fn loss_ignores_positive_rescaling_of_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (i, x) = (random(&mut rng, &[6, 5]), random(&mut rng, &[6, 5]));
    let base = loss(i.clone(), x.clone(), 0.07);
    let scale = |m: &Tensor, rng: &mut ChaCha8Rng| {
        let mut out = m.clone();
        for row in out.data_mut().chunks_mut(5) {
            let s = 10f64.powf(rng.random_range(-3.0..3.0));
            row.iter_mut().for_each(|v| *v *= s);
        }
        out
    };
    let l = loss(scale(&i, &mut rng), scale(&x, &mut rng), 0.07);
    assert!((l - base).abs() < 1e-9, "{l} vs {base}");
}

#[test]
pub fn temperature_must_be_positive() {
    let e = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    assert!(contrastive_loss(&ContrastiveBatch { image_embeddings: e.clone(), text_embeddings: e, temperature: 0.0 }).is_err());
}

#[test]
pub fn half_of_256_patches_kept() {
    for seed in 0..20 {
        let m = sample_patch_mask(256, 0.5, seed).unwrap();
        assert_eq!(m.kept_count(), 128);
        assert_eq!(m.sequence_keep()[0], true);
        assert_eq!(m.sequence_keep().len(), 257);
    }
    assert_eq!(dropped_for_ratio(256, 0.5), 128);
}

#[test]
pub fn same_seed_same_mask() {
    assert_eq!(sample_patch_mask(64, 0.3, 9).unwrap(), sample_patch_mask(64, 0.3, 9).unwrap());
    assert!(sample_patch_mask(64, 1.0, 9).is_err());
}

#[test]
pub fn dropout_keeps_class_token_first_and_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, n, d) = (2, 16, 4);
    let patches = random(&mut rng, &[b, n, d]);
    let pos = random(&mut rng, &[n + 1, d]);
    let cls = random(&mut rng, &[d]);
    let masks = [sample_patch_mask(n, 0.5, 1).unwrap(), sample_patch_mask(n, 0.5, 2).unwrap()];
    let mut tape = Tape::new();
    let (p, q, c) = (tape.constant(patches.clone()), tape.constant(pos.clone()), tape.constant(cls.clone()));
    let out = apply_patch_dropout(&mut tape, p, q, c, &masks).unwrap();
    let out = tape.value(out).clone();
    assert_eq!(out.shape(), &[b, 9, d]);
    for (bi, m) in masks.iter().enumerate() {
        let row = |j: usize| &out.data()[(bi * 9 + j) * d..(bi * 9 + j + 1) * d];
        for k in 0..d {
            assert_eq!(row(0)[k], cls.data()[k] + pos.data()[k]);
        }
        for (slot, &j) in m.kept_indices().iter().enumerate() {
            for k in 0..d {
                assert_eq!(row(slot + 1)[k], patches.data()[(bi * n + j) * d + k] + pos.data()[(j + 1) * d + k]);
            }
        }
    }
}

#[test]
pub fn all_keep_mask_is_bit_exact_identity() {
    let cfg = TowerConfig::vision(2, 16, 2, 4, 16, 8);
    let w = build_tower(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random(&mut rng, &[3, 3, 16, 16]);
    let keep: Vec<Vec<bool>> = (0..3).map(|_| PatchMask::all_kept(16).sequence_keep()).collect();
    let a = encode_image(&w, &cfg, &images, None).unwrap();
    let b = encode_image(&w, &cfg, &images, Some(&keep)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
pub fn distillation_of_identical_features_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random(&mut rng, &[2, 6, 3]);
    let masks = vec![sample_patch_mask(6, 0.5, 1).unwrap(); 2];
    assert!(distillation_loss(&f, &f, &masks).unwrap().abs() < 1e-12);
    let neg = t(&[2, 6, 3], f.data().iter().map(|v| -v).collect());
    assert!((distillation_loss(&neg, &f, &masks).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
pub fn distillation_needs_a_masked_position() {
    let f = Tensor::ones(&[1, 4, 2]);
    assert!(distillation_loss(&f, &f, &[PatchMask::all_kept(4)]).is_err());
}

fn feature_strategy(b: usize, n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b * n * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_is_non_negative_and_scale_free(
        a in feature_strategy(1, 4, 3),
        c in feature_strategy(1, 4, 3),
        s in 0.01f64..100.0,
        tau in 0.01f64..2.0,
    ) {
        let (i, x) = (t(&[4, 3], a.clone()), t(&[4, 3], c));
        let l = loss(i.clone(), x.clone(), tau);
        prop_assert!(l >= 0.0);
        let scaled = t(&[4, 3], a.iter().map(|v| v * s).collect());
        prop_assert!((loss(scaled, x, tau) - l).abs() <= 1e-9 * l.max(1.0));
    }

    #[test]
    fn distillation_is_bounded_and_per_token_scale_free(
        st in feature_strategy(2, 5, 3),
        te in feature_strategy(2, 5, 3),
        scales in prop::collection::vec(0.01f64..100.0, 10),
        seed in 0u64..1000,
    ) {
        let masks = vec![sample_patch_mask(5, 0.4, seed).unwrap(), sample_patch_mask(5, 0.4, seed + 1).unwrap()];
        let (s, tt) = (t(&[2, 5, 3], st.clone()), t(&[2, 5, 3], te));
        let l = distillation_loss(&s, &tt, &masks).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        let rescaled: Vec<f64> = st.iter().enumerate().map(|(i, v)| v * scales[i / 3]).collect();
        let l2 = distillation_loss(&t(&[2, 5, 3], rescaled), &tt, &masks).unwrap();
        prop_assert!((l2 - l).abs() < 1e-12);
    }

    #[test]
    fn masks_drop_the_rounded_count_and_keep_order(n in 1usize..300, ratio in 0.0f64..0.95, seed in 0u64..1000) {
        let m = sample_patch_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(m.dropped_count(), (ratio * n as f64).round() as usize);
        let kept = m.kept_indices();
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(kept.len() + m.dropped_indices().len(), n);
    }
}
