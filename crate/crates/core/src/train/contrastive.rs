use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{BatchSampler, Corpus};
use super::plan::{validate_clip_stages, TrainStage};
use super::step::{collect_grads, in_batch_accuracy, lamb_towers, StageTrace, StepRecord};
use crate::error::{bail, Result};
use crate::model::{text_forward, vision_forward, ClipConfig, ClipModel, TowerWeights};
use crate::objectives::{contrastive_loss_on_tape, sample_patch_mask_with, LogitScale};
use crate::optim::{build_param_groups, cosine_lr, peak_lr_table, LambState, OptimConfig, ScheduleSpec};
use crate::tensor::{Tape, Tensor};

/// Result of contrastive training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRun {
    pub model: ClipModel,
    pub optimizer: LambState,
    pub traces: Vec<StageTrace>,
}

impl ClipRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.traces.last().and_then(StageTrace::final_loss)
    }
}

const LOGIT_SCALE_KEY: &str = "logit_scale.log";

/// Trains a CLIP model through consecutive contrastive stages under one
/// warmup + cosine schedule (warmup from the first stage, total = all
/// stages' steps) with a single LAMB state. `on_step` sees every record.
pub fn run_clip_stages(
    mut model: ClipModel,
    corpus: &Corpus,
    stages: &[TrainStage],
    optim: &OptimConfig,
    log_every: u64,
    seed: u64,
    on_step: &mut dyn FnMut(&str, &StepRecord),
) -> Result<ClipRun> {
    model.config.validate()?;
    let res = model.config.vision.input_resolution_or_zero();
    validate_clip_stages(stages, "clip_stages", res)?;
    if log_every == 0 {
        bail!(Config, "log_every must be positive");
    }
    let n_patches = model.config.vision.num_patches().unwrap_or(0);
    let groups = build_param_groups(&model.vision, &model.config.vision, &model.text, &model.config.text, optim)?;
    let mut peaks = peak_lr_table(&groups)?;
    peaks.insert(LOGIT_SCALE_KEY.into(), optim.vision_peak_lr);
    let head_peak = optim.vision_peak_lr;
    let schedule = ScheduleSpec {
        peak_lr: 1.0,
        warmup_steps: stages[0].warmup_steps,
        total_steps: stages.iter().map(TrainStage::steps).sum(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LambState::new();
    let mut log_scale = Tensor::scalar(-libm::log(model.config.temperature));
    let learnable = model.config.temperature_learnable;
    let mut traces = Vec::with_capacity(stages.len());
    let mut global = 0u64;

    for stage in stages {
        let mut sampler = BatchSampler::new(corpus, &stage.data_mix)?;
        let mut trace = StageTrace::new(&stage.name, stage.objective);
        for _ in 0..stage.steps() {
            global += 1;
            let factor = cosine_lr(global, &schedule).lr;
            let batch = sampler.next_batch(stage.batch_size, res, stage.augment, &mut rng)?;
            let keep: Option<Vec<Vec<bool>>> = if stage.patch_dropout > 0.0 {
                let masks = (0..stage.batch_size)
                    .map(|_| sample_patch_mask_with(n_patches, stage.patch_dropout, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                Some(masks.iter().map(|m| m.sequence_keep()).collect())
            } else {
                None
            };
            let visible = keep.as_ref().map_or(n_patches, |k| k[0].iter().skip(1).filter(|&&f| f).count());

            let mut tape = Tape::new();
            let vb = model.vision.bind(&mut tape, true);
            let tb = model.text.bind(&mut tape, true);
            let img = vision_forward(&mut tape, &vb, &model.config.vision, &batch.images, keep.as_deref())?;
            let txt = text_forward(&mut tape, &tb, &model.config.text, &batch.tokens)?;
            let scale_var = learnable.then(|| tape.param(log_scale.clone()));
            let scale = match scale_var {
                Some(v) => LogitScale::Learned(v),
                None => LogitScale::Fixed(model.config.temperature),
            };
            let out = contrastive_loss_on_tape(&mut tape, img.embedding, txt, scale)?;
            let loss = tape.value(out.loss).item()?;
            if !loss.is_finite() {
                bail!(Numeric, "stage `{}` step {global}: loss is {loss}", stage.name);
            }
            let accuracy = (global % log_every == 0 || global == schedule.total_steps).then(|| in_batch_accuracy(tape.value(out.logits)));
            let grads = tape.backward(out.loss)?;
            let mut all = BTreeMap::new();
            collect_grads("vision", &vb, &grads, &mut all);
            collect_grads("text", &tb, &grads, &mut all);
            if let Some(v) = scale_var {
                all.insert(LOGIT_SCALE_KEY.into(), grads.get_or_zeros(v));
            }
            drop(tape);

            let lr = |key: &str| peaks.get(key).copied().unwrap_or(0.0) * factor;
            let mut extras: Vec<(&str, &mut Tensor)> = Vec::new();
            if learnable {
                extras.push((LOGIT_SCALE_KEY, &mut log_scale));
            }
            lamb_towers(
                &mut state,
                &optim.hyper,
                &mut [("vision", &mut model.vision), ("text", &mut model.text)],
                &mut extras,
                &all,
                &lr,
            )?;
            let record = StepRecord { step: global, loss, lr: head_peak * factor, visible_patches: visible, in_batch_accuracy: accuracy };
            on_step(&stage.name, &record);
            trace.steps.push(record);
        }
        traces.push(trace);
    }
    if learnable {
        model.config.temperature = libm::exp(-log_scale.item()?);
    }
    Ok(ClipRun { model, optimizer: state, traces })
}

/// Single contrastive stage from given tower initialisations; shapes are
/// checked against `config` first.
pub fn run_clip_stage(
    vision_init: TowerWeights,
    text_init: TowerWeights,
    config: ClipConfig,
    corpus: &Corpus,
    stage: &TrainStage,
    optim: &OptimConfig,
    seed: u64,
) -> Result<ClipRun> {
    let model = ClipModel::from_parts(config, vision_init, text_init)?;
    run_clip_stages(model, corpus, core::slice::from_ref(stage), optim, 10, seed, &mut |_, _| {})
}

/// First step at which the mean loss of the trailing `window` steps reaches
/// `threshold`, if any. Only full windows count, so the answer is never
/// below `window`.
pub fn steps_to_reach(traces: &[StageTrace], threshold: f64, window: usize) -> Option<u64> {
    let steps: Vec<&StepRecord> = traces.iter().flat_map(|t| &t.steps).collect();
    let w = window.max(1);
    let mut sum = 0.0;
    for (i, s) in steps.iter().enumerate() {
        sum += s.loss;
        if i >= w {
            sum -= steps[i - w].loss;
        }
        if i + 1 >= w && sum / w as f64 <= threshold {
            return Some(s.step);
        }
    }
    None
}
