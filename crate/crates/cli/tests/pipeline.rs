use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accelgraph::data::load_checkpoint;
use accelgraph::graph::AdjacencyVariant;
use accelgraph::model::ArchKind;

/// About ten vehicles on the road for two minutes, with a model small
/// enough to train in a second.
const TINY: &str = r#"
seed = 3

[synthetic]
lanes = 2
vehicles_per_lane = 5
corridor_length = 200.0
duration_frames = 1200
burn_in_frames = 100

[synthetic.idm]
desired_speed = 12.0

[training]
widths = [8, 8, 4]
mixture_components = 3
epochs = 1
tau = 30.0

[rollout]
samples_per_trajectory = 2
max_egos_per_segment = 2
"#;

fn accelgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accelgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = accelgraph(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Workspace { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, out: &str) -> PathBuf {
        let dir = self.path(out);
        ok(&["synth", "--config", s(&self.config), "--out", s(&dir)]);
        dir
    }

    fn train(&self, corpus: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let mut args = vec!["train", "--config", s(&self.config), "--corpus", s(corpus), "--out", s(&dir)];
        args.extend_from_slice(extra);
        ok(&args);
        dir
    }

    fn simulate(&self, corpus: &Path, model: &Path, out: &str) -> PathBuf {
        let dir = self.path(out);
        ok(&[
            "simulate",
            "--config",
            s(&self.config),
            "--corpus",
            s(corpus),
            "--model",
            s(model),
            "--out",
            s(&dir),
            "--workers",
            "1",
        ]);
        dir
    }
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let ws = Workspace::new();
    let corpus = ws.synth("corpus");
    let corpus_before = snapshot(&corpus);

    let model = ws.train(&corpus, "train", &["--arch", "egcn", "--epochs", "2"]);
    assert!(model.join("model.ckpt").is_file());
    let log = std::fs::read_to_string(model.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus one row per epoch");
    let model_before = snapshot(&model);

    let sims = ws.simulate(&corpus, &model, "sims");
    assert!(sims.join("trajectories.csv").is_file() && sims.join("truths.csv").is_file());

    let metrics = ws.path("metrics");
    ok(&["evaluate", "--sims", s(&sims), "--out", s(&metrics)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(metrics.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["models"][0]["model"], "EGCN");
    assert_eq!(report["models"][0]["velocity_rmse"].as_array().unwrap().len(), 10);

    let table = ws.path("table");
    let json = metrics.join("metrics.json");
    ok(&["report", "--out", s(&table), s(&json), s(&json)]);
    let csv = std::fs::read_to_string(table.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("model,metric,horizon,value"));

    for dir in [&corpus, &model, &sims, &metrics, &table] {
        let run = std::fs::read_to_string(dir.join("run_config.toml")).unwrap();
        assert!(run.contains("command = "), "{}", dir.display());
    }
    let train_run = std::fs::read_to_string(model.join("run_config.toml")).unwrap();
    assert!(train_run.contains("epochs = 2") && train_run.contains("seed = 3"));

    assert_eq!(snapshot(&corpus), corpus_before, "corpus modified");
    assert_eq!(snapshot(&model), model_before, "model directory modified");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let ws = Workspace::new();
    let corpus = ws.synth("corpus");
    let again = ws.synth("corpus2");
    assert_eq!(
        std::fs::read(corpus.join("corpus.csv")).unwrap(),
        std::fs::read(again.join("corpus.csv")).unwrap()
    );
    let a = ws.train(&corpus, "a", &["--arch", "dgcn", "--recurrent"]);
    let b = ws.train(&corpus, "b", &["--arch", "dgcn", "--recurrent"]);
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(b.join("model.ckpt")).unwrap()
    );
    let sa = ws.simulate(&corpus, &a, "sa");
    let sb = ws.simulate(&corpus, &b.join("model.ckpt"), "sb");
    for f in ["trajectories.csv", "truths.csv"] {
        assert_eq!(std::fs::read(sa.join(f)).unwrap(), std::fs::read(sb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gcn_and_egcn_differ_only_in_adjacency_and_ego_path() {
    let ws = Workspace::new();
    let corpus = ws.synth("corpus");
    let egcn = load_checkpoint(&ws.train(&corpus, "egcn", &["--arch", "egcn"]).join("model.ckpt")).unwrap();
    let gcn = load_checkpoint(&ws.train(&corpus, "gcn", &["--arch", "gcn", "--self-loops"]).join("model.ckpt")).unwrap();
    let (e, g) = (&egcn.config.arch, &gcn.config.arch);
    assert_eq!((e.kind, e.adjacency, e.ego_path), (ArchKind::Egcn, Some(AdjacencyVariant::Binary), true));
    assert_eq!(
        (g.kind, g.adjacency, g.ego_path),
        (ArchKind::Gcn, Some(AdjacencyVariant::SelfLoopBinary), false)
    );
    assert_eq!((e.recurrent, e.widths, e.leaky_slope), (g.recurrent, g.widths, g.leaky_slope));
    assert_eq!(egcn.config.tau, gcn.config.tau);
    assert_eq!(egcn.config.learning_rate, gcn.config.learning_rate);
}

#[test]
fn self_loops_belong_to_gcn_only() {
    let ws = Workspace::new();
    let corpus = ws.synth("corpus");
    let out = accelgraph(&[
        "train",
        "--corpus",
        s(&corpus),
        "--arch",
        "egcn",
        "--self-loops",
        "--out",
        s(&ws.path("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--self-loops"));
}

#[test]
fn unknown_arch_is_a_usage_error_listing_the_names() {
    let ws = Workspace::new();
    let out = accelgraph(&["train", "--corpus", s(&ws.root), "--arch", "resnet", "--out", s(&ws.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["fc", "lstm", "gcn", "gat", "egcn", "dgcn"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn evaluate_without_a_dump_is_a_path_error() {
    let ws = Workspace::new();
    let empty = ws.path("empty");
    std::fs::create_dir(&empty).unwrap();
    for sims in [empty.clone(), ws.path("missing")] {
        let out = accelgraph(&["evaluate", "--sims", s(&sims), "--out", s(&ws.path("m"))]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.contains(s(&sims)), "{err}");
    }
}

#[test]
fn output_may_not_overwrite_an_input() {
    let ws = Workspace::new();
    let corpus = ws.synth("corpus");
    let out = accelgraph(&["train", "--config", s(&ws.config), "--corpus", s(&corpus), "--out", s(&corpus)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("must differ"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    std::fs::write(&bad, "[training]\nepochz = 3\n").unwrap();
    let out = accelgraph(&["synth", "--config", s(&bad), "--out", s(&ws.path("c"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}
