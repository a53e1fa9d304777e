use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::contrastive::{run_clip_stages, ClipRun};
use super::data::Corpus;
use super::distill::{run_distillation, student_clip};
use super::plan::{derive_seed, CyclePlan, TrainStage};
use super::step::{StageTrace, StepRecord};
use crate::error::{Error, Result};
use crate::eval::ZeroShotBenchmark;
use crate::model::{count_parameters, forward_gflops, ClipConfig, ClipModel, TowerConfig};
use crate::optim::{LambState, OptimConfig};

/// Headline evaluation numbers for one model, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub benchmark: String,
    pub top1: f64,
    pub top5: f64,
}

/// Scores a model after each generation.
pub trait ModelEvaluator {
    fn evaluate(&self, model: &ClipModel) -> Result<EvalSummary>;
}

impl ModelEvaluator for ZeroShotBenchmark<'_> {
    fn evaluate(&self, model: &ClipModel) -> Result<EvalSummary> {
        let r = self.run(model)?;
        Ok(EvalSummary { benchmark: self.name.clone(), top1: 100.0 * r.top1, top5: 100.0 * r.top5 })
    }
}

/// One model in the lineage: the seed (index 0) or a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub index: usize,
    pub name: String,
    pub teacher: Option<String>,
    pub teacher_hash: Option<String>,
    pub output_hash: String,
    pub seed: u64,
    pub vision: TowerConfig,
    pub text: TowerConfig,
    pub temperature: f64,
    pub vision_params: u64,
    pub text_params: u64,
    pub total_params: u64,
    pub vision_gflops: f64,
    pub text_gflops: f64,
    /// Forward GFLOPs summed over every sample seen while producing this model.
    pub train_gflops: f64,
    pub samples_seen: u64,
    pub optimizer_steps: u64,
    pub final_distill_loss: Option<f64>,
    pub final_contrastive_loss: Option<f64>,
    pub eval: EvalSummary,
}

/// Why a cycle stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub stage: String,
    pub kind: String,
    pub message: String,
}

/// Append-only record of a cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub plan_seed: u64,
    pub entries: Vec<LineageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureNote>,
}

/// One point of the scaling curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub generation: usize,
    pub name: String,
    pub total_params: u64,
    pub vision_params: u64,
    pub vision_gflops: f64,
    pub train_gflops: f64,
    pub top1: f64,
    pub top5: f64,
}

impl LineageRecord {
    /// Entries after the seed (which always has index 0).
    pub fn generations(&self) -> &[LineageEntry] {
        self.entries.get(1..).unwrap_or(&[])
    }

    pub fn scaling_curve(&self) -> Vec<CurvePoint> {
        self.entries
            .iter()
            .map(|e| CurvePoint {
                generation: e.index,
                name: e.name.clone(),
                total_params: e.total_params,
                vision_params: e.vision_params,
                vision_gflops: e.vision_gflops,
                train_gflops: e.train_gflops,
                top1: e.eval.top1,
                top5: e.eval.top5,
            })
            .collect()
    }
}

/// Hooks for persistence and progress. Every method has a no-op default.
pub trait CycleObserver {
    fn stage_started(&mut self, _model: &str, _stage: &str) {}
    fn step(&mut self, _model: &str, _stage: &str, _record: &StepRecord) {}
    fn stage_finished(&mut self, _model: &str, _trace: &StageTrace) -> Result<()> {
        Ok(())
    }
    /// A model is final; `optimizer` holds its contrastive LAMB state.
    fn model_ready(&mut self, _name: &str, _model: &ClipModel, _optimizer: Option<&LambState>) -> Result<()> {
        Ok(())
    }
    /// Called after every appended entry and once more on failure.
    fn lineage_updated(&mut self, _lineage: &LineageRecord) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl CycleObserver for NoopObserver {}

/// Completed cycle.
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub lineage: LineageRecord,
    pub final_model: ClipModel,
}

/// Aborted cycle: the lineage up to the last completed model, plus the cause.
#[derive(Debug, Clone)]
pub struct CycleFailure {
    pub partial: LineageRecord,
    pub error: Error,
}

impl core::fmt::Display for CycleFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} (after {} completed models)", self.error, self.partial.entries.len())
    }
}

fn stage_gflops(stage: &TrainStage, vision: &TowerConfig, text: Option<&TowerConfig>) -> f64 {
    let per = forward_gflops(vision) + text.map_or(0.0, forward_gflops);
    per * stage.samples_to_see as f64
}

struct Forward<'a, 'o> {
    observer: &'o mut dyn CycleObserver,
    model: &'a str,
}

impl Forward<'_, '_> {
    fn train_clip(&mut self, model: ClipModel, corpus: &Corpus, stages: &[TrainStage], optim: &OptimConfig, log_every: u64, seed: u64) -> Result<ClipRun> {
        if let Some(s) = stages.first() {
            self.observer.stage_started(self.model, &s.name);
        }
        let mut current = stages.first().map(|s| s.name.clone()).unwrap_or_default();
        let name = self.model;
        let observer = &mut *self.observer;
        let run = run_clip_stages(model, corpus, stages, optim, log_every, seed, &mut |stage, rec| {
            if stage != current {
                observer.stage_started(name, stage);
                current = stage.to_string();
            }
            observer.step(name, stage, rec);
        })?;
        for t in &run.traces {
            self.observer.stage_finished(self.model, t)?;
        }
        Ok(run)
    }
}

fn entry_for(
    index: usize,
    name: &str,
    teacher: Option<(&str, String)>,
    seed: u64,
    model: &ClipModel,
    samples_seen: u64,
    train_gflops: f64,
    steps: u64,
    distill_loss: Option<f64>,
    clip_loss: Option<f64>,
    eval: EvalSummary,
) -> LineageEntry {
    LineageEntry {
        index,
        name: name.to_string(),
        teacher: teacher.as_ref().map(|t| t.0.to_string()),
        teacher_hash: teacher.map(|t| t.1),
        output_hash: model.content_hash(),
        seed,
        vision: model.config.vision.clone(),
        text: model.config.text.clone(),
        temperature: model.config.temperature,
        vision_params: count_parameters(&model.config.vision),
        text_params: count_parameters(&model.config.text),
        total_params: model.total_parameters(),
        vision_gflops: forward_gflops(&model.config.vision),
        text_gflops: forward_gflops(&model.config.text),
        train_gflops,
        samples_seen,
        optimizer_steps: steps,
        final_distill_loss: distill_loss,
        final_contrastive_loss: clip_loss,
        eval,
    }
}

/// Runs the closed loop: obtain the seed teacher (trained from scratch by
/// the plan, or `seed_model` when given), then for every generation distil a
/// larger vision tower, pair it with the teacher's text tower, train
/// contrastively, evaluate, and promote the result to teacher.
pub fn run_weak_to_strong_cycle(
    plan: &CyclePlan,
    corpus: &Corpus,
    evaluator: &dyn ModelEvaluator,
    seed_model: Option<ClipModel>,
    observer: &mut dyn CycleObserver,
) -> Result<CycleOutcome, CycleFailure> {
    let mut lineage = LineageRecord { plan_seed: plan.seed, entries: Vec::new(), failure: None };
    let mut stage_name = String::from("validate");
    let result = cycle_inner(plan, corpus, evaluator, seed_model, observer, &mut lineage, &mut stage_name);
    match result {
        Ok(final_model) => Ok(CycleOutcome { lineage, final_model }),
        Err(error) => {
            lineage.failure = Some(FailureNote { stage: stage_name, kind: error.kind().to_string(), message: format!("{error}") });
            let _ = observer.lineage_updated(&lineage);
            Err(CycleFailure { partial: lineage, error })
        }
    }
}

fn cycle_inner(
    plan: &CyclePlan,
    corpus: &Corpus,
    evaluator: &dyn ModelEvaluator,
    seed_model: Option<ClipModel>,
    observer: &mut dyn CycleObserver,
    lineage: &mut LineageRecord,
    stage_name: &mut String,
) -> Result<ClipModel> {
    plan.validate()?;
    let seed_name = plan.seed_model.name.as_str();
    let seed_cfg: ClipConfig = plan.seed_clip_config();

    *stage_name = format!("{seed_name}/init");
    let init_seed = derive_seed(plan.seed, "seed/init");
    let (mut teacher, steps, loss, samples, gflops, opt) = match seed_model {
        Some(m) => {
            if m.config.vision != seed_cfg.vision || m.config.text != seed_cfg.text {
                return Err(Error::Config(format!("supplied seed model does not match seed_model config ({})", crate::model::describe(&m.config.vision))));
            }
            (m, 0, None, 0, 0.0, None)
        }
        None if plan.seed_model.stages.is_empty() => (ClipModel::build(seed_cfg.clone(), init_seed)?, 0, None, 0, 0.0, None),
        None => {
            *stage_name = format!("{seed_name}/contrastive");
            let model = ClipModel::build(seed_cfg.clone(), init_seed)?;
            let stages = &plan.seed_model.stages;
            let run = Forward { observer, model: seed_name }.train_clip(model, corpus, stages, &plan.optim, plan.log_every, derive_seed(plan.seed, "seed/clip"))?;
            let samples = stages.iter().map(|s| s.samples_to_see).sum();
            let gflops = stages.iter().map(|s| stage_gflops(s, &seed_cfg.vision, Some(&seed_cfg.text))).sum();
            let loss = run.final_loss();
            (run.model, run.optimizer.step_count(), loss, samples, gflops, Some(run.optimizer))
        }
    };
    *stage_name = format!("{seed_name}/eval");
    let eval = evaluator.evaluate(&teacher)?;
    observer.model_ready(seed_name, &teacher, opt.as_ref())?;
    lineage
        .entries
        .push(entry_for(0, seed_name, None, init_seed, &teacher, samples, gflops, steps, None, loss, eval));
    observer.lineage_updated(lineage)?;

    for (g, gen) in plan.generations.iter().enumerate() {
        let gen_seed = derive_seed(plan.seed, &format!("generation/{}", gen.name));
        let teacher_hash = teacher.content_hash();

        *stage_name = format!("{}/{}", gen.name, gen.distill.name);
        observer.stage_started(&gen.name, &gen.distill.name);
        let optim = gen.optim.as_ref().unwrap_or(&plan.optim);
        let distilled = run_distillation(&teacher, &gen.student, corpus, &gen.distill, optim, plan.distillation, derive_seed(gen_seed, "distill"))?;
        observer.stage_finished(&gen.name, &distilled.trace)?;
        let distill_steps = distilled.optimizer_steps;
        let distill_loss = distilled.trace.final_loss();

        *stage_name = format!("{}/init", gen.name);
        let init = student_clip(&teacher, plan.generation_clip_config(g), distilled)?;

        *stage_name = format!("{}/contrastive", gen.name);
        let run = Forward { observer, model: &gen.name }.train_clip(init, corpus, &gen.clip_stages, optim, plan.log_every, derive_seed(gen_seed, "clip"))?;

        *stage_name = format!("{}/eval", gen.name);
        let eval = evaluator.evaluate(&run.model)?;
        observer.model_ready(&gen.name, &run.model, Some(&run.optimizer))?;
        let samples = gen.distill.samples_to_see + gen.clip_stages.iter().map(|s| s.samples_to_see).sum::<u64>();
        let gflops = stage_gflops(&gen.distill, &gen.student, None)
            + stage_gflops(&gen.distill, &teacher.config.vision, None)
            + gen.clip_stages.iter().map(|s| stage_gflops(s, &gen.student, Some(&run.model.config.text))).sum::<f64>();
        let steps = distill_steps + run.optimizer.step_count();
        lineage.entries.push(entry_for(
            g + 1,
            &gen.name,
            Some((&gen.teacher, teacher_hash)),
            gen_seed,
            &run.model,
            samples,
            gflops,
            steps,
            distill_loss,
            run.final_loss(),
            eval,
        ));
        observer.lineage_updated(lineage)?;
        teacher = run.model;
    }
    Ok(teacher)
}
