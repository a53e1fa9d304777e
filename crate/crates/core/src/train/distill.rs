use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{BatchSampler, Corpus};
use super::plan::{Objective, TrainStage};
use super::step::{collect_grads, lamb_towers, StageTrace, StepRecord};
use crate::error::{bail, Result};
use crate::model::{build_tower, image_token_features, vision_forward, ClipConfig, ClipModel, TowerConfig, TowerInput, TowerWeights};
use crate::objectives::{distillation_loss_on_tape, sample_patch_mask_with, PatchMask};
use crate::optim::{build_vision_groups, cosine_lr, peak_lr_table, LambState, OptimConfig, ScheduleSpec};
use crate::tensor::{Tape, Tensor};

/// Result of distilling a student vision tower.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillRun {
    pub student: TowerWeights,
    /// The `[student width, teacher width]` alignment map, discarded by the
    /// cycle once distillation ends.
    pub alignment: Option<Tensor>,
    pub trace: StageTrace,
    pub optimizer_steps: u64,
}

const ALIGN_KEY: &str = "align.weight";

/// How the student is matched to the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillOptions {
    /// Learned linear map from student to teacher feature width.
    #[serde(default = "default_true")]
    pub alignment_head: bool,
    /// Also regress the teacher's final class-token feature, at every step.
    #[serde(default = "default_true")]
    pub class_token: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self { alignment_head: true, class_token: true }
    }
}

/// Identity on the leading `min(rows, cols)` diagonal, zero elsewhere.
pub fn identity_alignment(rows: usize, cols: usize) -> Tensor {
    let mut data = alloc::vec![0.0; rows * cols];
    for i in 0..rows.min(cols) {
        data[i * cols + i] = 1.0;
    }
    Tensor::new(alloc::vec![rows, cols], data).expect("shape matches data")
}

fn patch_rows(b: usize, n: usize) -> Vec<usize> {
    (0..b).flat_map(|i| (1..=n).map(move |j| i * (n + 1) + j)).collect()
}

/// Distils a freshly initialised student (seeded with `seed`).
pub fn run_distillation(
    teacher: &ClipModel,
    student_cfg: &TowerConfig,
    corpus: &Corpus,
    stage: &TrainStage,
    optim: &OptimConfig,
    options: DistillOptions,
    seed: u64,
) -> Result<DistillRun> {
    let init = build_tower(student_cfg, seed)?;
    run_distillation_from(teacher, student_cfg, init, corpus, stage, optim, options, seed)
}

/// Distils `student_init` towards the frozen teacher's final-normed token
/// features. The student sees whole images; each step regresses the teacher
/// features at a random `mask_ratio` subset of patch positions, plus the
/// class token when `options.class_token` is set.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation_from(
    teacher: &ClipModel,
    student_cfg: &TowerConfig,
    student_init: TowerWeights,
    corpus: &Corpus,
    stage: &TrainStage,
    optim: &OptimConfig,
    options: DistillOptions,
    seed: u64,
) -> Result<DistillRun> {
    student_cfg.validate()?;
    student_init.check_against(student_cfg)?;
    stage.validate("distill")?;
    if stage.objective != Objective::Distill {
        bail!(Config, "distill.objective must be distill");
    }
    let tcfg = &teacher.config.vision;
    let (TowerInput::Vision { patch_size: tp, input_resolution: tr, .. }, TowerInput::Vision { patch_size: sp, input_resolution: sr, .. }) =
        (tcfg.input, student_cfg.input)
    else {
        bail!(Config, "distillation needs vision towers");
    };
    if tp != sp || tr != sr || stage.resolution != sr {
        bail!(Config, "teacher ({tr}px/{tp}) and student ({sr}px/{sp}) must share one patch grid at the stage resolution {}", stage.resolution);
    }
    let (ds, dt) = (student_cfg.width, tcfg.width);
    if ds != dt && !options.alignment_head {
        bail!(Config, "student width {ds} differs from teacher width {dt} and the alignment head is disabled");
    }
    let n = student_cfg.num_patches().unwrap_or(0);

    let mut student = student_init;
    let mut align = options.alignment_head.then(|| identity_alignment(ds, dt));
    let groups = build_vision_groups(&student, student_cfg, optim.vision_peak_lr, optim.vision_layer_decay)?;
    let mut peaks = peak_lr_table(&groups)?;
    peaks.insert(ALIGN_KEY.into(), optim.vision_peak_lr);
    let schedule = ScheduleSpec { peak_lr: 1.0, warmup_steps: stage.warmup_steps, total_steps: stage.steps() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = BatchSampler::new(corpus, &stage.data_mix)?;
    let mut state = LambState::new();
    let mut trace = StageTrace::new(&stage.name, stage.objective);
    let b = stage.batch_size;
    let class_token = options.class_token;
    let rows = if class_token { (0..b * (n + 1)).collect() } else { patch_rows(b, n) };
    let m = if class_token { n + 1 } else { n };

    for step in 1..=stage.steps() {
        let factor = cosine_lr(step, &schedule).lr;
        let batch = sampler.next_batch(b, sr, stage.augment, &mut rng)?;
        let target = image_token_features(&teacher.vision, tcfg, &batch.images)?
            .reshape(&[b * (n + 1), dt])?
            .select_rows(&rows)?
            .reshape(&[b, m, dt])?;
        let masks = (0..b)
            .map(|_| {
                let mask = sample_patch_mask_with(n, stage.mask_ratio, &mut rng)?;
                Ok(if class_token { PatchMask::new(mask.sequence_keep().iter().enumerate().map(|(i, &k)| i > 0 && k).collect()) } else { mask })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let sb = student.bind(&mut tape, true);
        let out = vision_forward(&mut tape, &sb, student_cfg, &batch.images, None)?;
        let flat = tape.reshape(out.tokens, &[b * (n + 1), ds])?;
        let feats = tape.index_rows(flat, &rows)?;
        let align_var = align.as_ref().map(|a| tape.param(a.clone()));
        let feats = match align_var {
            Some(a) => tape.matmul(feats, a)?,
            None => feats,
        };
        let feats = tape.reshape(feats, &[b, m, dt])?;
        let loss_var = distillation_loss_on_tape(&mut tape, feats, &target, &masks)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            bail!(Numeric, "distillation step {step}: loss is {loss}");
        }
        let grads = tape.backward(loss_var)?;
        let mut all = BTreeMap::new();
        collect_grads("vision", &sb, &grads, &mut all);
        if let Some(a) = align_var {
            all.insert(ALIGN_KEY.into(), grads.get_or_zeros(a));
        }
        drop(tape);

        let lr = |key: &str| peaks.get(key).copied().unwrap_or(0.0) * factor;
        let mut extras: Vec<(&str, &mut Tensor)> = Vec::new();
        if let Some(a) = align.as_mut() {
            extras.push((ALIGN_KEY, a));
        }
        lamb_towers(&mut state, &optim.hyper, &mut [("vision", &mut student)], &mut extras, &all, &lr)?;
        trace.steps.push(StepRecord { step, loss, lr: optim.vision_peak_lr * factor, visible_patches: n, in_batch_accuracy: None });
    }
    Ok(DistillRun { student, alignment: align, optimizer_steps: state.step_count(), trace })
}

/// The CLIP model a generation starts contrastive training from: the
/// distilled student next to the teacher's text tower. The student's
/// projection becomes `alignment · teacher projection` (or the teacher's own
/// projection when the widths match without a head), so the student enters
/// the shared embedding space where the teacher left it.
pub fn student_clip(teacher: &ClipModel, config: ClipConfig, run: DistillRun) -> Result<ClipModel> {
    let teacher_proj = teacher.vision.get("projection")?;
    let mut student = run.student;
    let projection = match &run.alignment {
        Some(a) => {
            let mut tape = Tape::new();
            let (a, p) = (tape.constant(a.clone()), tape.constant(teacher_proj.clone()));
            let out = tape.matmul(a, p)?;
            tape.value(out).clone()
        }
        None => teacher_proj.clone(),
    };
    student.insert("projection".into(), projection);
    ClipModel::from_parts(config, student, teacher.text.clone())
}

/// Distillation loss of a student against the teacher on one fixed batch,
/// without training (identity alignment when widths differ).
pub fn distillation_probe(
    teacher: &ClipModel,
    student: &TowerWeights,
    student_cfg: &TowerConfig,
    images: &Tensor,
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    let b = images.shape().first().copied().unwrap_or(0);
    let n = student_cfg.num_patches().unwrap_or(0);
    let (ds, dt) = (student_cfg.width, teacher.config.vision.width);
    let rows = patch_rows(b, n);
    let target = image_token_features(&teacher.vision, &teacher.config.vision, images)?
        .reshape(&[b * (n + 1), dt])?
        .select_rows(&rows)?
        .reshape(&[b, n, dt])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = (0..b).map(|_| sample_patch_mask_with(n, mask_ratio, &mut rng)).collect::<Result<Vec<_>>>()?;
    let feats = image_token_features(student, student_cfg, images)?
        .reshape(&[b * (n + 1), ds])?
        .select_rows(&rows)?;
    let mut tape = Tape::new();
    let f = tape.constant(feats);
    let a = tape.constant(identity_alignment(ds, dt));
    let f = tape.matmul(f, a)?;
    let f = tape.reshape(f, &[b, n, dt])?;
    let loss = distillation_loss_on_tape(&mut tape, f, &target, &masks)?;
    tape.value(loss).item()
}
