//! Training loops, plan validation and the closed cycle on a tiny corpus.

use clipladder_core::model::{build_tower, ClipConfig, ClipModel, TowerConfig};
use clipladder_core::optim::OptimConfig;
use clipladder_core::tensor::Tensor;
use clipladder_core::train::{
    run_clip_stage, run_clip_stages, run_distillation, run_distillation_from, run_weak_to_strong_cycle, steps_to_reach,
    student_clip, Corpus, CyclePlan, DistillOptions, EvalSummary, Generation, ModelEvaluator, NoopObserver, Objective,
    PairDataset, SeedModel, StageTrace, StepRecord, TrainStage,
};
use clipladder_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: usize = 8;
const VOCAB: usize = 12;
const CTX: usize = 4;

/// Each class paints one channel and says its own word.
fn corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 3 * RES * RES);
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let c = rng.random_range(0..3);
        for ch in 0..3 {
            for _ in 0..RES * RES {
                images.push(if ch == c { 0.8 } else { 0.1 } + rng.random_range(-0.05..0.05));
            }
        }
        tokens.push(vec![1, 2 + c, VOCAB - 1, 0]);
        labels.push(c);
    }
    let set = PairDataset::new(Tensor::new(vec![n, 3, RES, RES], images).unwrap(), tokens, labels).unwrap();
    Corpus::single("train", set)
}

fn vision(layers: usize, width: usize) -> TowerConfig {
    TowerConfig::vision(layers, width, 2, 4, RES, 8)
}

fn text() -> TowerConfig {
    TowerConfig::text(1, 8, 2, VOCAB, CTX, 8)
}

fn clip_stage(name: &str, samples: u64) -> TrainStage {
    TrainStage::new(name, Objective::Contrastive, samples, 4, RES)
}

fn distill_stage(samples: u64) -> TrainStage {
    TrainStage::new("distill", Objective::Distill, samples, 4, RES)
}

fn plan() -> CyclePlan {
    let gen = |name: &str, teacher: &str, width: usize| Generation {
        name: name.into(),
        teacher: teacher.into(),
        student: vision(1, width),
        distill: distill_stage(8),
        clip_stages: vec![clip_stage("clip", 8)],
        optim: None,
    };
    CyclePlan {
        seed: 3,
        temperature: 0.1,
        temperature_learnable: false,
        optim: OptimConfig { vision_peak_lr: 1e-2, text_peak_lr: 1e-2, ..OptimConfig::default() },
        log_every: 1,
        distillation: DistillOptions::default(),
        seed_model: SeedModel { name: "seed".into(), vision: vision(1, 8), text: text(), stages: vec![clip_stage("seed-clip", 8)] },
        generations: vec![gen("g1", "seed", 12), gen("g2", "g1", 16)],
    }
}

struct Fixed;

impl ModelEvaluator for Fixed {
    fn evaluate(&self, model: &ClipModel) -> Result<EvalSummary> {
        Ok(EvalSummary { benchmark: "fixed".into(), top1: model.vision_parameters() as f64, top5: 0.0 })
    }
}

#[test]
fn contrastive_steps_are_counted_and_scheduled() {
    let cfg = ClipConfig::new(vision(1, 8), text());
    let stage = clip_stage("s", 10); // ceil(10 / 4) = 3 steps
    let v0 = build_tower(&cfg.vision, 1).unwrap();
    let run = run_clip_stage(v0.clone(), build_tower(&cfg.text, 2).unwrap(), cfg, &corpus(16, 0), &stage, &OptimConfig::default(), 5).unwrap();
    assert_eq!(run.optimizer.step_count(), 3);
    let steps: Vec<u64> = run.traces[0].steps.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![1, 2, 3]);
    assert_eq!(run.traces[0].steps[2].lr, 0.0);
    assert_ne!(run.model.vision, v0);
    assert!(run.final_loss().unwrap().is_finite());
}

#[test]
fn stages_share_one_schedule() {
    let model = ClipModel::build(ClipConfig::new(vision(1, 8), text()), 1).unwrap();
    let mut first = clip_stage("a", 16);
    first.warmup_steps = 2;
    let stages = [first, clip_stage("b", 16)];
    let mut seen = Vec::new();
    let run = run_clip_stages(model, &corpus(16, 0), &stages, &OptimConfig::default(), 1, 5, &mut |s, r| seen.push((s.to_string(), r.step, r.lr)))
        .unwrap();
    assert_eq!(run.traces.len(), 2);
    assert_eq!(seen.iter().map(|s| s.1).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    let peak = OptimConfig::default().vision_peak_lr;
    assert_eq!(seen[1].2, peak);
    assert_eq!(seen[7].2, 0.0);
    assert!(seen[4].2 < peak && seen[4].0 == "b");
}

#[test]
fn distillation_leaves_teacher_untouched() {
    let teacher = ClipModel::build(ClipConfig::new(vision(1, 8), text()), 1).unwrap();
    let before = teacher.clone();
    let run = run_distillation(&teacher, &vision(1, 12), &corpus(16, 0), &distill_stage(12), &OptimConfig::default(), DistillOptions::default(), 4)
        .unwrap();
    assert_eq!(teacher, before);
    assert_eq!(run.optimizer_steps, 3);
    assert_eq!(run.alignment.as_ref().unwrap().shape(), &[12, 8]);
    let student = student_clip(&teacher, ClipConfig::new(vision(1, 12), text()), run).unwrap();
    assert_eq!(student.text, teacher.text);
    assert_eq!(student.vision.get("projection").unwrap().shape(), &[12, 8]);
}

#[test]
fn teacher_copy_starts_closer_than_random_student() {
    let teacher = ClipModel::build(ClipConfig::new(vision(1, 8), text()), 1).unwrap();
    let data = corpus(16, 0);
    let stage = distill_stage(8);
    let optim = OptimConfig::default();
    let copy = run_distillation_from(&teacher, &vision(1, 8), teacher.vision.clone(), &data, &stage, &optim, DistillOptions::default(), 4).unwrap();
    let random = run_distillation(&teacher, &vision(1, 8), &data, &stage, &optim, DistillOptions::default(), 4).unwrap();
    let (c, r) = (copy.trace.steps[0].loss, random.trace.steps[0].loss);
    assert!(c < 1e-9, "{c}");
    assert!(c < r);
}

#[test]
fn mismatched_patch_grid_is_rejected() {
    let teacher = ClipModel::build(ClipConfig::new(vision(1, 8), text()), 1).unwrap();
    let student = TowerConfig::vision(1, 12, 2, 2, RES, 8);
    let err = run_distillation(&teacher, &student, &corpus(8, 0), &distill_stage(4), &OptimConfig::default(), DistillOptions::default(), 4);
    assert!(matches!(err, Err(clipladder_core::Error::Config(_))));
}

fn config_error(p: &CyclePlan) -> String {
    match p.validate() {
        Err(clipladder_core::Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn plan_validation_names_the_key() {
    assert!(plan().validate().is_ok());

    let mut p = plan();
    p.generations[1].teacher = "seed".into();
    assert!(config_error(&p).contains("generations[1].teacher"));

    let mut p = plan();
    p.generations[1].student = vision(1, 12);
    assert!(config_error(&p).contains("generations[1].student"));

    let mut p = plan();
    p.generations[0].clip_stages.push(TrainStage { warmup_steps: 1, ..clip_stage("late", 8) });
    assert!(config_error(&p).contains("generations[0].clip_stages[1].warmup_steps"));

    let mut p = plan();
    p.generations[0].distill.resolution = 16;
    assert!(config_error(&p).contains("generations[0].distill.resolution"));

    let mut p = plan();
    p.generations[1].optim = Some(OptimConfig { text_layer_decay: 0.0, ..OptimConfig::default() });
    assert!(config_error(&p).contains("generations[1].optim.text_layer_decay"));

    let mut p = plan();
    p.generations.clear();
    assert!(config_error(&p).contains("generations"));
}

#[test]
fn cycle_is_deterministic_and_wired() {
    let data = corpus(16, 0);
    let a = run_weak_to_strong_cycle(&plan(), &data, &Fixed, None, &mut NoopObserver).unwrap();
    let b = run_weak_to_strong_cycle(&plan(), &data, &Fixed, None, &mut NoopObserver).unwrap();
    assert_eq!(a.lineage, b.lineage);
    assert_eq!(a.final_model, b.final_model);

    let e = &a.lineage.entries;
    assert_eq!(e.len(), 3);
    assert_eq!(e[0].index, 0);
    assert!(e[0].teacher.is_none() && e[0].teacher_hash.is_none());
    for g in 1..e.len() {
        assert_eq!(e[g].teacher.as_deref(), Some(e[g - 1].name.as_str()));
        assert_eq!(e[g].teacher_hash.as_ref(), Some(&e[g - 1].output_hash));
        assert!(e[g].vision_params > e[g - 1].vision_params);
        assert_eq!(e[g].text_params, e[0].text_params);
        assert_eq!(e[g].optimizer_steps, 4);
    }
    assert_eq!(e[2].output_hash, a.final_model.content_hash());
    assert_eq!(a.lineage.generations().len(), 2);
    assert_eq!(a.lineage.scaling_curve().len(), 3);

    let mut other = plan();
    other.seed = 4;
    let c = run_weak_to_strong_cycle(&other, &data, &Fixed, None, &mut NoopObserver).unwrap();
    assert_ne!(c.lineage.entries[2].output_hash, e[2].output_hash);
}

#[test]
fn failed_cycle_keeps_partial_lineage() {
    let mut p = plan();
    p.generations[1].distill.data_mix = [("missing".to_string(), 1.0)].into();
    let err = run_weak_to_strong_cycle(&p, &corpus(16, 0), &Fixed, None, &mut NoopObserver).unwrap_err();
    assert_eq!(err.partial.entries.len(), 2);
    assert!(err.partial.failure.as_ref().unwrap().stage.starts_with("g2/"));
}

fn trace(losses: &[f64]) -> StageTrace {
    let mut t = StageTrace::new("t", Objective::Contrastive);
    t.steps = losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| StepRecord { step: i as u64 + 1, loss, lr: 0.0, visible_patches: 0, in_batch_accuracy: None })
        .collect();
    t
}

#[test]
fn steps_to_reach_uses_full_windows() {
    let t = [trace(&[0.5, 3.0, 0.2, 0.2, 0.2])];
    assert_eq!(steps_to_reach(&t, 1.0, 1), Some(1));
    assert_eq!(steps_to_reach(&t, 1.0, 2), Some(4));
    assert_eq!(steps_to_reach(&t, 1.0, 3), Some(5));
    assert_eq!(steps_to_reach(&t, 0.1, 2), None);
    let split = [trace(&[3.0, 3.0]), trace(&[0.1, 0.1])];
    assert_eq!(steps_to_reach(&split, 1.0, 2), Some(2));
}
