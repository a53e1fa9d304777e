//! The `clipladder` binary: exit codes, config echo and reproducible output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clipladder"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["count", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["count", "--threads", "0", "--config", "x"]).status.code(), Some(2));
}

#[test]
fn missing_file_is_a_runtime_error() {
    let o = run(&["count", "--config", "/nonexistent/plan.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]:"));
}

fn broken_plan(find: &str, replace: &str) -> (tempfile::TempDir, PathBuf) {
    let text = std::fs::read_to_string(configs().join("toy_cycle.toml")).unwrap();
    assert!(text.contains(find));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.toml");
    std::fs::write(&path, text.replacen(find, replace, 1)).unwrap();
    (dir, path)
}

#[test]
fn malformed_plans_name_the_key() {
    let cases = [
        ("teacher = \"gen1\"", "teacher = \"seed\"", "generations[1].teacher"),
        ("temperature = 0.07", "temperature = -1.0", "temperature"),
        ("log_every = 50", "log_every = 50\nlearning_rate = 3", "learning_rate"),
        ("patch_size = 8", "patch_size = \"eight\"", "patch_size"),
    ];
    for (find, replace, key) in cases {
        let (dir, plan) = broken_plan(find, replace);
        let o = run(&["cycle", "--config", p(&plan), "--data", "/nonexistent", "--out", p(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{key}: {}", stderr(&o));
        let err = stderr(&o);
        assert!(err.starts_with("error[config]:") && err.contains(key), "{key}: {err}");
    }
}

#[test]
fn count_reports_the_large_text_tower() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["count", "--config", p(&configs().join("text_tower.toml")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let params: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("parameters = "))
        .expect("parameters line")
        .parse()
        .unwrap();
    assert!((params / 695e6 - 1.0).abs() <= 0.02, "{params}");
    assert!(out.contains("layers = 32") && out.contains("width = 1280") && out.contains("heads = 20"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("count.json")).unwrap()).unwrap();
    assert_eq!(json["tower"]["parameters"].as_f64(), Some(params));
}

const TINY_CLIP: &str = r#"
seed = 1

[model.vision]
modality = "vision"
layers = 1
width = 16
heads = 2
norm_kind = "rms"
qkv_bias = false
projection_dim = 8
patch_size = 4
input_resolution = 16

[model.text]
modality = "text"
layers = 1
width = 16
heads = 2
norm_kind = "layer"
qkv_bias = true
projection_dim = 8
vocab_size = 139
context_length = 16
end_token = 2

[[stages]]
name = "clip"
objective = "contrastive"
samples_to_see = 64
batch_size = 16
resolution = 16
"#;

const TINY_CORPUS: &str = "seed = 2\nclasses = 10\nimage_size = 16\ntrain = 64\nval = 40\ntest = 30\nvideo_clips = 10\nvideo_frames = 8\n";

#[test]
fn defaults_are_echoed_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("clip.toml");
    std::fs::write(&cfg, TINY_CLIP).unwrap();
    let o = run(&["train-clip", "--config", p(&cfg), "--data", "/nonexistent", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    for line in [
        "optim.vision_peak_lr = 4e-4",
        "optim.text_peak_lr = 4e-5",
        "optim.vision_layer_decay = 0.9",
        "optim.text_layer_decay = 0.75",
        "effective_model.temperature = 0.01",
        "threads = 1",
    ] {
        assert!(out.lines().any(|l| l == line), "missing `{line}` in\n{out}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("config.txt")).unwrap(), out);
}

#[test]
fn evaluation_reports_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("corpus.toml"), TINY_CORPUS).unwrap();
    std::fs::write(root.join("clip.toml"), TINY_CLIP).unwrap();
    let data = root.join("data");
    let o = run(&["gen-data", "--config", p(&root.join("corpus.toml")), "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let model = root.join("model");
    let o = run(&["train-clip", "--config", p(&root.join("clip.toml")), "--data", p(&data), "--out", p(&model)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(model.join("trace.jsonl")).unwrap().lines().count(), 4);

    let manifest = configs().join("eval_manifest.toml");
    let ckpt = model.join("model.ckpt");
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = root.join(name);
        let o = run(&["eval", p(&ckpt), "--data", p(&data), "--config", p(&manifest), "--out", p(&out), "--threads", threads]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push(out);
    }
    for file in ["report.jsonl", "report.csv", "summary.json"] {
        let first = std::fs::read(outputs[0].join(file)).unwrap();
        assert!(!first.is_empty());
        for other in &outputs[1..] {
            assert_eq!(first, std::fs::read(other.join(file)).unwrap(), "{file}");
        }
    }
    let csv = std::fs::read_to_string(outputs[0].join("report.csv")).unwrap();
    assert!(csv.starts_with("benchmark,metric,k,transform,value\n"));
    for needle in ["shapes,top1,,direct_resize,", "captions,mean_recall", "clips,video_score", "probe,linear_probe_top1"] {
        assert!(csv.contains(needle), "{needle}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(outputs[0].join("summary.json")).unwrap()).unwrap();
    assert!(summary["robustness_delta"].is_number());
}
