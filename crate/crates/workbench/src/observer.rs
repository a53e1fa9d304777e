//! Cycle observer that persists everything under an output directory:
//! `lineage.json`, `trace.jsonl`, one checkpoint per model under `models/`
//! and the wall-clock sidecar `timing.csv`. Only the sidecar varies between
//! identical runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clipladder_core::model::ClipModel;
use clipladder_core::optim::LambState;
use clipladder_core::train::{CycleObserver, LineageRecord, StageTrace, StepRecord};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{write_file, Error};
use crate::report::{trace_line, write_lineage};

pub struct FileObserver {
    out: PathBuf,
    trace: BufWriter<File>,
    timing: String,
    started: BTreeMap<(String, String), Instant>,
    verbose: bool,
    pending: Option<Error>,
}

impl FileObserver {
    pub fn create(out: &Path, verbose: bool) -> crate::Result<Self> {
        std::fs::create_dir_all(out.join("models")).map_err(|e| Error::io(out, e))?;
        let path = out.join("trace.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            trace: BufWriter::new(file),
            timing: String::from("model,stage,steps,seconds\n"),
            started: BTreeMap::new(),
            verbose,
            pending: None,
        })
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out.join("models").join(format!("{name}.ckpt"))
    }

    /// Flushes the trace and the timing sidecar.
    pub fn finish(mut self) -> crate::Result<()> {
        if let Some(e) = self.pending.take() {
            return Err(e);
        }
        self.trace.flush().map_err(|e| Error::io(&self.out.join("trace.jsonl"), e))?;
        write_file(&self.out.join("timing.csv"), &self.timing)
    }

    fn core_err(e: Error) -> clipladder_core::Error {
        match e {
            Error::Core(c) => c,
            other => clipladder_core::Error::Checkpoint(other.to_string()),
        }
    }
}

impl CycleObserver for FileObserver {
    fn stage_started(&mut self, model: &str, stage: &str) {
        self.started.insert((model.to_string(), stage.to_string()), Instant::now());
        if self.verbose {
            eprintln!("[{model}] stage `{stage}` started");
        }
    }

    fn step(&mut self, model: &str, stage: &str, record: &StepRecord) {
        if self.pending.is_some() {
            return;
        }
        let line = trace_line(model, stage, record).and_then(|l| {
            writeln!(self.trace, "{l}").map_err(|e| Error::io(&self.out.join("trace.jsonl"), e))
        });
        if let Err(e) = line {
            self.pending = Some(e);
        }
        if self.verbose {
            if let Some(acc) = record.in_batch_accuracy {
                eprintln!(
                    "[{model}/{stage}] step {} loss {:.4} lr {:.3e} in-batch acc {:.3}",
                    record.step, record.loss, record.lr, acc
                );
            }
        }
    }

    fn stage_finished(&mut self, model: &str, trace: &StageTrace) -> clipladder_core::Result<()> {
        if let Some(e) = self.pending.take() {
            return Err(Self::core_err(e));
        }
        let secs = self
            .started
            .remove(&(model.to_string(), trace.name.clone()))
            .map_or(0.0, |t| t.elapsed().as_secs_f64());
        self.timing.push_str(&format!("{model},{},{},{secs:.3}\n", trace.name, trace.steps.len()));
        if self.verbose {
            eprintln!("[{model}] stage `{}` finished: {} steps, final loss {:?}", trace.name, trace.steps.len(), trace.final_loss());
        }
        Ok(())
    }

    fn model_ready(&mut self, name: &str, model: &ClipModel, optimizer: Option<&LambState>) -> clipladder_core::Result<()> {
        let meta = BTreeMap::from([("name".to_string(), name.to_string())]);
        save_checkpoint(&self.checkpoint_path(name), &Checkpoint::from_model(model, optimizer, meta)).map_err(Self::core_err)
    }

    fn lineage_updated(&mut self, lineage: &LineageRecord) -> clipladder_core::Result<()> {
        write_lineage(&self.out.join("lineage.json"), lineage).map_err(Self::core_err)
    }
}
