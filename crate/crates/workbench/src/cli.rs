//! Command-line entry points.
//!
//! Every subcommand prints its effective configuration as `key = value`
//! lines and, when `--out` is given, also writes it to `config.txt` there.
//! Failures print one line `error[kind]: message` to stderr; usage and
//! configuration errors exit with 2, all other failures with 1.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use clipladder_core::eval::{PromptTemplateSet, TransformMode, ZeroShotBenchmark};
use clipladder_core::model::{count_parameters, forward_gflops, ClipConfig, ClipModel, TowerConfig};
use clipladder_core::train::{derive_seed, run_clip_stages, run_distillation, student_clip, CyclePlan, CycleObserver, TrainStage};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{config_dump, load_count_target, load_toml, resolve, CountTarget, DistillConfig, EvalManifest, TrainClipConfig};
use crate::corpus::{generate_synthetic_corpus, SyntheticSpec, EVAL_TEMPLATES};
use crate::dataset::{write_corpus, CorpusDir};
use crate::error::{write_file, Error, Result};
use crate::evaluate::{context_length, run_manifest, with_threads};
use crate::observer::FileObserver;
use crate::report::{read_lineage, scaling_curve_csv, trace_line, write_eval_outcome};

#[derive(Debug, Parser)]
#[command(name = "clipladder", version, about = "Weak-to-strong CLIP training workbench")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Overrides the seed in the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Configuration file of the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus from a corpus spec.
    GenData,
    /// Distil a larger vision tower from a teacher checkpoint.
    Distill {
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Contrastive training from a checkpoint or from scratch.
    TrainClip {
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a whole weak-to-strong plan and record its lineage.
    Cycle {
        #[arg(long)]
        data: PathBuf,
        /// Split scored after every generation.
        #[arg(long, default_value = "test")]
        eval_split: String,
        /// Seed teacher checkpoint; the plan's seed stages must then be empty.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a benchmark manifest.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print parameter and GFLOP counts of a tower or CLIP config.
    Count,
    /// Turn a lineage record into a scaling-curve CSV.
    Report { lineage: PathBuf },
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            // core errors already start with their kind
            let msg = text.strip_prefix(&format!("{} error: ", e.kind())).unwrap_or(&text);
            eprintln!("error[{}]: {msg}", e.kind());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::GenData => gen_data(g),
        Command::Distill { data } => distill(g, data),
        Command::TrainClip { data } => train_clip(g, data),
        Command::Cycle { data, eval_split, init } => cycle(g, data, eval_split, init.as_deref()),
        Command::Eval { checkpoint, data } => eval(g, checkpoint, data),
        Command::Count => count(g),
        Command::Report { lineage } => report(g, lineage),
    }
}

fn config_path(g: &Global) -> Result<&Path> {
    g.config.as_deref().ok_or_else(|| Error::Usage("this subcommand needs --config".into()))
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Usage("this subcommand needs --out".into()))
}

/// Prints the dump and stores it next to the outputs.
fn echo_config<T: Serialize>(g: &Global, effective: &T) -> Result<()> {
    let dump = config_dump(effective)?;
    print!("{dump}");
    if let Some(out) = &g.out {
        write_file(&out.join("config.txt"), &dump)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct WithRuntime<'a, T> {
    threads: usize,
    #[serde(flatten)]
    config: &'a T,
}

fn echo<T: Serialize>(g: &Global, config: &T) -> Result<()> {
    echo_config(g, &WithRuntime { threads: g.threads, config })
}

fn gen_data(g: &Global) -> Result<()> {
    let mut spec: SyntheticSpec = load_toml(config_path(g)?)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = out_dir(g)?;
    echo(g, &spec)?;
    let splits = generate_synthetic_corpus(&spec)?;
    write_corpus(out, &spec, &splits)?;
    for s in &splits {
        eprintln!("wrote split `{}`: {} items", s.name, s.labels.len());
    }
    Ok(())
}

fn text_context(cfg: &TowerConfig) -> Result<usize> {
    match cfg.input {
        clipladder_core::model::TowerInput::Text { context_length, .. } => Ok(context_length),
        _ => Err(Error::config("text tower expected")),
    }
}

/// Split names referenced by the stages' data mixes.
fn stage_splits<'a>(stages: impl IntoIterator<Item = &'a TrainStage>) -> Vec<String> {
    let mut names: Vec<String> = stages.into_iter().flat_map(|s| s.data_mix.keys().cloned()).collect();
    names.sort();
    names.dedup();
    names
}

fn load_corpus(data: &Path, splits: &[String], ctx: usize) -> Result<(CorpusDir, clipladder_core::train::Corpus)> {
    let dir = CorpusDir::open(data)?;
    let tok = dir.tokenizer(ctx)?;
    let names: Vec<&str> = splits.iter().map(String::as_str).collect();
    let corpus = dir.corpus(&names, &tok)?;
    Ok((dir, corpus))
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn distill(g: &Global, data: &Path) -> Result<()> {
    let path = config_path(g)?;
    let mut cfg: DistillConfig = load_toml(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = out_dir(g)?;
    echo(g, &cfg)?;
    let teacher = load_checkpoint(&resolve(path, &cfg.teacher))?.model()?;
    let ctx = text_context(&teacher.config.text)?;
    let (_, corpus) = load_corpus(data, &stage_splits([&cfg.stage]), ctx)?;
    let run = run_distillation(&teacher, &cfg.student, &corpus, &cfg.stage, &cfg.optim, cfg.distillation, derive_seed(cfg.seed, "distill"))?;
    write_trace(out, "student", &cfg.stage.name, &run.trace.steps)?;
    let final_loss = run.trace.final_loss().map(|l| l.to_string()).unwrap_or_default();
    let steps = run.optimizer_steps;
    // Stored as a CLIP pair with the teacher's text tower so that
    // `train-clip` can start from it directly.
    let config = ClipConfig { vision: cfg.student.clone(), ..teacher.config.clone() };
    let model = student_clip(&teacher, config, run)?;
    let md = meta(&[("name", "student".into()), ("teacher_hash", teacher.content_hash()), ("final_distill_loss", final_loss.clone())]);
    save_checkpoint(&out.join("student.ckpt"), &Checkpoint::from_model(&model, None, md))?;
    eprintln!("distilled {steps} steps, final loss {final_loss}");
    Ok(())
}

fn write_trace(out: &Path, model: &str, stage: &str, steps: &[clipladder_core::train::StepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in steps {
        text.push_str(&trace_line(model, stage, r)?);
        text.push('\n');
    }
    write_file(&out.join("trace.jsonl"), text)
}

fn train_clip(g: &Global, data: &Path) -> Result<()> {
    let path = config_path(g)?;
    let mut cfg: TrainClipConfig = load_toml(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = out_dir(g)?;
    let model = match (&cfg.init, &cfg.model) {
        (Some(init), None) => load_checkpoint(&resolve(path, init))?.model()?,
        (None, Some(m)) => ClipModel::build(m.clone(), derive_seed(cfg.seed, "init"))?,
        _ => return Err(Error::config("exactly one of `init` and `model` must be set")),
    };
    #[derive(Serialize)]
    struct Effective<'a> {
        #[serde(flatten)]
        file: &'a TrainClipConfig,
        effective_model: &'a ClipConfig,
    }
    echo(g, &Effective { file: &cfg, effective_model: &model.config })?;
    let ctx = text_context(&model.config.text)?;
    let (_, corpus) = load_corpus(data, &stage_splits(&cfg.stages), ctx)?;
    let mut lines = String::new();
    let mut failure = None;
    let run = run_clip_stages(model, &corpus, &cfg.stages, &cfg.optim, cfg.log_every, derive_seed(cfg.seed, "clip"), &mut |stage, r| {
        match trace_line("model", stage, r) {
            Ok(l) => {
                lines.push_str(&l);
                lines.push('\n');
            }
            Err(e) => failure = Some(e),
        }
        if let Some(acc) = r.in_batch_accuracy {
            eprintln!("[{stage}] step {} loss {:.4} in-batch acc {acc:.3}", r.step, r.loss);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_file(&out.join("trace.jsonl"), lines)?;
    let final_loss = run.final_loss().map(|l| l.to_string()).unwrap_or_default();
    let md = meta(&[("name", "model".into()), ("final_contrastive_loss", final_loss)]);
    save_checkpoint(&out.join("model.ckpt"), &Checkpoint::from_model(&run.model, Some(&run.optimizer), md))
}

fn cycle(g: &Global, data: &Path, eval_split: &str, init: Option<&Path>) -> Result<()> {
    let path = config_path(g)?;
    let mut plan: CyclePlan = load_toml(path)?;
    if let Some(s) = g.seed {
        plan.seed = s;
    }
    plan.validate()?;
    let out = out_dir(g)?;
    #[derive(Serialize)]
    struct Effective<'a> {
        eval_split: &'a str,
        #[serde(flatten)]
        plan: &'a CyclePlan,
    }
    echo(g, &Effective { eval_split, plan: &plan })?;

    let seed_model = init.map(|p| load_checkpoint(p).and_then(|c| c.model())).transpose()?;
    let ctx = text_context(&plan.seed_model.text)?;
    let stages = plan.seed_model.stages.iter().chain(plan.generations.iter().flat_map(|g| std::iter::once(&g.distill).chain(&g.clip_stages)));
    let (dir, corpus) = load_corpus(data, &stage_splits(stages), ctx)?;
    let tok = dir.tokenizer(ctx)?;
    let split = dir.read_split(eval_split)?;
    let evaluator = ZeroShotBenchmark {
        name: eval_split.to_string(),
        images: split.images,
        labels: split.labels,
        class_names: dir.class_names(),
        templates: PromptTemplateSet::new(&EVAL_TEMPLATES)?,
        tokenizer: &tok,
        transform: TransformMode::DirectResize,
    };

    let mut observer = FileObserver::create(out, true)?;
    let result = clipladder_core::train::run_weak_to_strong_cycle(&plan, &corpus, &evaluator, seed_model, &mut observer as &mut dyn CycleObserver);
    observer.finish()?;
    match result {
        Ok(outcome) => {
            write_file(&out.join("scaling_curve.csv"), scaling_curve_csv(&outcome.lineage.scaling_curve()))?;
            for e in &outcome.lineage.entries {
                eprintln!("{}: {} params, zero-shot top-1 {:.2}%", e.name, e.total_params, e.eval.top1);
            }
            Ok(())
        }
        Err(f) => Err(Error::Core(f.error)),
    }
}

fn eval(g: &Global, checkpoint: &Path, data: &Path) -> Result<()> {
    let path = config_path(g)?;
    let mut manifest: EvalManifest = load_toml(path)?;
    if let Some(s) = g.seed {
        manifest.seed = s;
    }
    manifest.validate()?;
    let out = out_dir(g)?;
    echo(g, &manifest)?;
    let model = load_checkpoint(checkpoint)?.model()?;
    context_length(&model)?;
    let dir = CorpusDir::open(data)?;
    let threads = g.threads;
    let outcome = with_threads(threads, || run_manifest(&model, &manifest, &dir, threads))??;
    write_eval_outcome(out, &outcome)?;
    print!("{}", crate::report::report_csv(&outcome.report));
    Ok(())
}

#[derive(Serialize)]
struct TowerCount {
    parameters: u64,
    forward_gflops: f64,
}

fn tower_count(cfg: &TowerConfig) -> TowerCount {
    TowerCount { parameters: count_parameters(cfg), forward_gflops: forward_gflops(cfg) }
}

fn count(g: &Global) -> Result<()> {
    let target = load_count_target(config_path(g)?)?;
    let (lines, counts) = match &target {
        CountTarget::Tower(t) => {
            t.validate()?;
            echo(g, t)?;
            let c = tower_count(t);
            (format!("parameters = {}\nforward_gflops = {}\n", c.parameters, c.forward_gflops), vec![("tower", c)])
        }
        CountTarget::Clip(c) => {
            c.validate()?;
            echo(g, c)?;
            let (v, t) = (tower_count(&c.vision), tower_count(&c.text));
            let text = format!(
                "vision.parameters = {}\nvision.forward_gflops = {}\ntext.parameters = {}\ntext.forward_gflops = {}\nparameters = {}\nforward_gflops = {}\n",
                v.parameters,
                v.forward_gflops,
                t.parameters,
                t.forward_gflops,
                v.parameters + t.parameters,
                v.forward_gflops + t.forward_gflops
            );
            (text, vec![("vision", v), ("text", t)])
        }
    };
    print!("{lines}");
    if let Some(out) = &g.out {
        let map: BTreeMap<&str, TowerCount> = counts.into_iter().collect();
        let json = serde_json::to_string_pretty(&map).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&out.join("count.json"), json + "\n")?;
    }
    Ok(())
}

fn report(g: &Global, lineage: &Path) -> Result<()> {
    let record = read_lineage(lineage)?;
    let csv = scaling_curve_csv(&record.scaling_curve());
    #[derive(Serialize)]
    struct Effective<'a> {
        lineage: &'a Path,
        plan_seed: u64,
        models: usize,
    }
    echo(g, &Effective { lineage, plan_seed: record.plan_seed, models: record.entries.len() })?;
    if let Some(f) = &record.failure {
        eprintln!("lineage records a failure in `{}`: {}", f.stage, f.message);
    }
    match &g.out {
        Some(out) => write_file(&out.join("scaling_curve.csv"), csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
