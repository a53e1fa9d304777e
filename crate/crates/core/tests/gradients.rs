//! Central-difference checks of every differentiable path, from single
//! operations up to a full toy CLIP step. Errors are norm-wise relative.

use clipladder_core::model::{
    build_tower, text_forward, vision_forward, BoundTower, TowerConfig, TowerInput, TowerWeights,
};
use clipladder_core::objectives::{contrastive_loss_on_tape, distillation_loss_on_tape, LogitScale, PatchMask};
use clipladder_core::tensor::gradcheck::check_gradients;
use clipladder_core::tensor::{causal_mask, Tape, Tensor, Var};
use clipladder_core::train::apply_patch_dropout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
/// Below this gradient norm both sides are finite-difference noise.
const ZERO_SCALE: f64 = 1e-8;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum against a fixed random tensor so every output element
/// contributes a distinct gradient.
fn project(tape: &mut Tape, x: Var, rng_seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

fn assert_check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> clipladder_core::Result<Var>) {
    let r = check_gradients(inputs, H, f).unwrap();
    let worst = r.max_relative_error();
    assert!(worst < TOL, "{name}: relative error {worst:e} ({:?})", r.relative_errors);
}

#[test]
pub fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..3 {
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let c = rand_tensor(&mut rng, &[3, 4]);
        assert_check("add/sub/mul", &[a, b, c], |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, v[2])?;
            let z = t.sub(y, v[1])?;
            let z = t.affine(z, 1.7, -0.2);
            Ok(project(t, z, trial))
        });
    }
}

#[test]
pub fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 5]);
    let b = rand_tensor(&mut rng, &[5, 4]);
    let c = rand_tensor(&mut rng, &[2, 6, 5]);
    assert_check("matmul", &[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(project(t, y, 7))
    });
    assert_check("matmul_nt", &[a, c], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        Ok(project(t, y, 8))
    });
}

#[test]
pub fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[1, 3, 4]);
    assert_check("reshape/permute/index/concat", &[a, b], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let r = t.reshape(p, &[8, 3])?;
        let rows = t.index_rows(r, &[0, 3, 3, 7])?;
        let c = t.concat(&[v[0], v[1]])?;
        let s1 = project(t, rows, 1);
        let s2 = project(t, c, 2);
        t.add(s1, s2)
    });
}

#[test]
pub fn nonlinearities_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..3 {
        let x = rand_tensor(&mut rng, &[3, 5]);
        assert_check("gelu", &[x.clone()], |t, v| {
            let y = t.gelu(v[0]);
            Ok(project(t, y, trial))
        });
        assert_check("exp", &[x.clone()], |t, v| {
            let y = t.exp(v[0]);
            Ok(project(t, y, trial))
        });
        assert_check("softmax", &[x.clone()], |t, v| {
            let y = t.softmax(v[0])?;
            Ok(project(t, y, trial))
        });
        assert_check("normalize", &[x.clone()], |t, v| {
            let y = t.normalize(v[0])?;
            Ok(project(t, y, trial))
        });
        assert_check("sum_last/mean", &[x.clone()], |t, v| {
            let y = t.sum_last(v[0])?;
            let y = t.mul(y, y)?;
            t.mean(y)
        });
        assert_check("cross_entropy", &[x], |t, v| t.cross_entropy(v[0], &[0, 4, 2]));
    }
}

#[test]
pub fn rms_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..3 {
        let x = rand_tensor(&mut rng, &[2, 3, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        assert_check("rms_norm", &[x, g], |t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-6)?;
            Ok(project(t, y, trial))
        });
    }
}

#[test]
pub fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..3 {
        let x = rand_tensor(&mut rng, &[2, 3, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        assert_check("layer_norm", &[x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            Ok(project(t, y, trial))
        });
    }
}

#[test]
pub fn attention_with_and_without_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..3 {
        let q = rand_tensor(&mut rng, &[2, 1, 3, 4]);
        let k = rand_tensor(&mut rng, &[2, 1, 3, 4]);
        let v = rand_tensor(&mut rng, &[2, 1, 3, 4]);
        let inputs = [q, k, v];
        assert_check("attention", &inputs, |t, x| {
            let y = t.attention(x[0], x[1], x[2], None)?;
            Ok(project(t, y, trial))
        });
        let mask = causal_mask(3);
        assert_check("causal attention", &inputs, |t, x| {
            let y = t.attention(x[0], x[1], x[2], Some(&mask))?;
            Ok(project(t, y, trial))
        });
    }
}

#[test]
pub fn gelu_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w1 = rand_tensor(&mut rng, &[4, 8]);
    let b1 = rand_tensor(&mut rng, &[8]);
    let w2 = rand_tensor(&mut rng, &[8, 4]);
    assert_check("mlp", &[x, w1, b1, w2], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add(h, v[2])?;
        let h = t.gelu(h);
        let y = t.matmul(h, v[3])?;
        Ok(project(t, y, 3))
    });
}

#[test]
pub fn contrastive_loss_fixed_and_learned_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let i = rand_tensor(&mut rng, &[4, 5]);
        let txt = rand_tensor(&mut rng, &[4, 5]);
        assert_check("contrastive fixed", &[i.clone(), txt.clone()], |t, v| {
            Ok(contrastive_loss_on_tape(t, v[0], v[1], LogitScale::Fixed(0.3))?.loss)
        });
        let s = Tensor::scalar(rng.random_range(0.0..2.0));
        assert_check("contrastive learned", &[i, txt, s], |t, v| {
            Ok(contrastive_loss_on_tape(t, v[0], v[1], LogitScale::Learned(v[2]))?.loss)
        });
    }
}

#[test]
pub fn distillation_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let student = rand_tensor(&mut rng, &[2, 4, 3]);
    let teacher = rand_tensor(&mut rng, &[2, 4, 3]);
    let masks = [PatchMask::new(vec![true, false, false, true]), PatchMask::new(vec![false, true, true, true])];
    assert_check("distillation", &[student], |t, v| distillation_loss_on_tape(t, v[0], &teacher, &masks));
}

#[test]
pub fn patch_dropout_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens = rand_tensor(&mut rng, &[2, 4, 3]);
    let pos = rand_tensor(&mut rng, &[5, 3]);
    let cls = rand_tensor(&mut rng, &[3]);
    let masks = [PatchMask::new(vec![true, false, true, false]), PatchMask::new(vec![false, false, true, true])];
    assert_check("patch dropout", &[tokens, pos, cls], |t, v| {
        let y = apply_patch_dropout(t, v[0], v[1], v[2], &masks)?;
        Ok(project(t, y, 4))
    });
}

fn toy_towers() -> (TowerConfig, TowerConfig) {
    let vision = TowerConfig::vision(1, 8, 2, 4, 8, 4);
    let mut text = TowerConfig::text(1, 8, 2, 12, 5, 4);
    if let TowerInput::Text { end_token, .. } = &mut text.input {
        *end_token = 2;
    }
    (vision, text)
}

fn bind_named(names: &[String], vars: &[Var]) -> BoundTower {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

fn flatten(w: &TowerWeights) -> (Vec<String>, Vec<Tensor>) {
    w.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

#[test]
pub fn full_toy_clip_forward_and_loss() {
    let (vc, tc) = toy_towers();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // random weights everywhere so norms, biases and gains are all exercised
    let perturb = |w: TowerWeights, rng: &mut ChaCha8Rng| -> TowerWeights {
        let map = w.into_map().into_iter().map(|(n, t)| (n, rand_tensor(rng, t.shape()))).collect();
        TowerWeights::from_map(map)
    };
    let vw = perturb(build_tower(&vc, 1).unwrap(), &mut rng);
    let tw = perturb(build_tower(&tc, 2).unwrap(), &mut rng);
    let images = rand_tensor(&mut rng, &[3, 3, 8, 8]);
    let tokens = vec![vec![1, 5, 7, 2, 0], vec![1, 9, 2, 0, 0], vec![1, 4, 11, 3, 2]];
    let (vn, vt) = flatten(&vw);
    let (tn, tt) = flatten(&tw);
    let nv = vn.len();
    let inputs: Vec<Tensor> = vt.into_iter().chain(tt).collect();
    let keep = vec![vec![true, true, false, true, true]; 3];
    for k in [None, Some(keep.as_slice())] {
        let r = check_gradients(&inputs, H, |t, v| {
            let vb = bind_named(&vn, &v[..nv]);
            let tb = bind_named(&tn, &v[nv..]);
            let img = vision_forward(t, &vb, &vc, &images, k)?;
            let txt = text_forward(t, &tb, &tc, &tokens)?;
            Ok(contrastive_loss_on_tape(t, img.embedding, txt, LogitScale::Fixed(0.5))?.loss)
        })
        .unwrap();
        let names: Vec<&String> = vn.iter().chain(&tn).collect();
        for i in r.failures(TOL, ZERO_SCALE) {
            panic!("{}: relative error {:e} at scale {:e}", names[i], r.relative_errors[i], r.scales[i]);
        }
    }
}

#[test]
pub fn vision_token_features_for_distillation() {
    let (vc, _) = toy_towers();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let vw = build_tower(&vc, 3).unwrap();
    let (vn, vt) = flatten(&vw);
    let images = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let teacher = rand_tensor(&mut rng, &[2, 4, 8]);
    let masks = [PatchMask::new(vec![true, false, false, true]), PatchMask::new(vec![false, true, true, false])];
    let r = check_gradients(&vt, H, |t, v| {
        let vb = bind_named(&vn, v);
        let out = vision_forward(t, &vb, &vc, &images, None)?;
        let flat = t.reshape(out.tokens, &[10, 8])?;
        let patches = t.index_rows(flat, &[1, 2, 3, 4, 6, 7, 8, 9])?;
        let patches = t.reshape(patches, &[2, 4, 8])?;
        distillation_loss_on_tape(t, patches, &teacher, &masks)
    })
    .unwrap();
    for i in r.failures(TOL, ZERO_SCALE) {
        panic!("{}: relative error {:e} at scale {:e}", vn[i], r.relative_errors[i], r.scales[i]);
    }
}
