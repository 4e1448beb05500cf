use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[camera]
fx = 129.714
fy = 129.714
cx = 79.5
cy = 59.5
width = 160
height = 120

[data]
scenes = 2

[learner]
workers = 1
train_scenes = 1
"#;

fn scenefill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenefill")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.s("small.toml");
        let mut all = vec!["--config", config.as_str()];
        all.extend_from_slice(args);
        scenefill(&all)
    }

    fn gen(&self, out: &str) -> Output {
        let out = self.run(&["gen", "--out", &self.s(out)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn manifest_hash(out: &Output) -> String {
    stdout(out).lines().find_map(|l| l.strip_prefix("manifest sha256 ").map(str::to_string)).expect("hash line")
}

fn trace_areas(path: &Path) -> Vec<u64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["area_now"].as_u64().unwrap())
        .collect()
}

#[test]
fn gen_is_reproducible_and_writes_every_scene() {
    let ws = Workspace::new();
    let a = ws.gen("a");
    let b = ws.gen("b");
    assert_eq!(manifest_hash(&a), manifest_hash(&b));
    let scenes: Vec<_> = fs::read_dir(ws.path("a")).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(scenes.len(), 2);
    assert!(ws.path("a/scene_00000/gt.ply").exists());
    assert!(ws.path("a/scene_00001/input_depth.png").exists());
    assert_eq!(fs::read(ws.path("a/manifest.json")).unwrap(), fs::read(ws.path("b/manifest.json")).unwrap());
}

#[test]
fn config_and_usage_errors_exit_with_one() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.toml"), "[scene]\nfurniture_labels = [5, 12]\n").unwrap();
    let out = scenefill(&["--config", &ws.s("bad.toml"), "gen", "--out", &ws.s("x")]);
    assert_eq!(code(&out), 1);
    fs::write(ws.path("typo.toml"), "[episode]\nalpah = 0.5\n").unwrap();
    assert_eq!(code(&scenefill(&["--config", &ws.s("typo.toml"), "defaults"])), 1);
    assert_eq!(code(&scenefill(&["gen"])), 1);
    assert_eq!(code(&scenefill(&["frobnicate"])), 1);
    assert_eq!(code(&ws.run(&["complete", "--scene", &ws.s("nowhere"), "--planner", "uniform0", "--out", &ws.s("o")])), 2);
}

#[test]
fn defaults_round_trip_through_the_config_parser() {
    let ws = Workspace::new();
    let out = scenefill(&["defaults"]);
    assert_eq!(code(&out), 0);
    fs::write(ws.path("defaults.toml"), stdout(&out)).unwrap();
    let again = scenefill(&["--config", &ws.s("defaults.toml"), "defaults"]);
    assert_eq!(stdout(&again), stdout(&out));
    assert!(stdout(&out).contains("alpha = 0.05"));
}

#[test]
fn oracle_completion_terminates_with_monotone_trace_and_is_reproducible() {
    let ws = Workspace::new();
    ws.gen("data");
    let scene = ws.s("data/scene_00000");
    let args = |out: &str| {
        ws.run(&["complete", "--scene", &scene, "--planner", "uniform20", "--inpainter", "oracle", "--out", &ws.s(out)])
    };
    let first = args("run1");
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&args("run2")), 0);
    let areas = trace_areas(&ws.path("run1/trace.jsonl"));
    assert!(!areas.is_empty() && areas.len() < 20);
    assert!(areas.windows(2).all(|w| w[1] <= w[0]));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("run1/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["terminal"], true);
    for f in ["completion.ply", "cloud.ply", "trace.jsonl"] {
        assert_eq!(fs::read(ws.path(&format!("run1/{f}"))).unwrap(), fs::read(ws.path(&format!("run2/{f}"))).unwrap());
    }
}

#[test]
fn missing_ground_truth_limits_modes() {
    let ws = Workspace::new();
    ws.gen("data");
    fs::remove_file(ws.path("data/scene_00001/gt.ply")).unwrap();
    let scene = ws.s("data/scene_00001");
    let run = |inpainter: &str, mode: Option<&str>| {
        let out = ws.s("out");
        let mut args = vec!["complete", "--scene", scene.as_str(), "--planner", "uniform5", "--inpainter", inpainter, "--out", out.as_str()];
        if let Some(m) = mode {
            args.extend(["--mode", m]);
        }
        ws.run(&args)
    };
    assert_eq!(code(&run("oracle", None)), 1);
    assert_eq!(code(&run("diffusion", Some("train"))), 1);
    let ok = run("diffusion", None);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let first = fs::read_to_string(ws.path("out/trace.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(record["r_total"].is_null());
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let ws = Workspace::new();
    ws.gen("data");
    let gt = ws.s("data/scene_00000/gt.ply");
    let out = ws.run(&["eval", "--pred", &gt, "--gt", &gt, "--out", &ws.s("metrics")]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(ws.path("metrics/metrics.txt")).unwrap();
    assert!(text.lines().any(|l| l == "cd=0.000000000"));
    let c: Vec<&str> = text.lines().filter(|l| l.starts_with("c_")).collect();
    let a: Vec<&str> = text.lines().filter(|l| l.starts_with("a_")).collect();
    assert_eq!((c.len(), a.len()), (5, 5));
    assert!(c.iter().chain(&a).all(|l| l.ends_with("=1.000000")));
    assert!(text.lines().filter(|l| l.ends_with("_completion=1.000000")).count() == 5);
    let missing = ws.run(&["eval", "--pred", &gt, "--gt", &ws.s("nope.ply"), "--out", &ws.s("m2")]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn seeded_single_worker_training_is_reproducible() {
    let ws = Workspace::new();
    let train = |out: &str| ws.run(&["train", "--episodes", "2", "--out", &ws.s(out)]);
    let a = train("t1");
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&train("t2")), 0);
    let curve = fs::read_to_string(ws.path("t1/curve.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    assert_eq!(curve, fs::read_to_string(ws.path("t2/curve.jsonl")).unwrap());
    assert_eq!(fs::read(ws.path("t1/policy.bin")).unwrap(), fs::read(ws.path("t2/policy.bin")).unwrap());

    ws.gen("data");
    let planner = format!("policy:{}", ws.s("t1/policy.bin"));
    let out = ws.run(&["complete", "--scene", &ws.s("data/scene_00000"), "--planner", &planner, "--inpainter", "oracle", "--out", &ws.s("c")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dqn_training_writes_q_parameters() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--learner", "dqn", "--episodes", "1", "--out", &ws.s("q")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path("q/q.bin").exists());
    assert_eq!(fs::read_to_string(ws.path("q/curve.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let ws = Workspace::new();
    let report = ws.s("grad.json");
    let ok = scenefill(&["gradcheck", "--out", &report]);
    assert_eq!(code(&ok), 0);
    let text = stdout(&ok);
    assert_eq!(text.lines().filter(|l| l.starts_with("trial ")).count(), 50);
    assert!(text.contains("PASS"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["max_rel_err"].as_f64().unwrap() < 1e-4);
    let bad = scenefill(&["gradcheck", "--corrupt", "0.01"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).contains("FAIL"));
}
