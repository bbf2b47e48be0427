use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adaug::dataset::{save_dataset, synth_sine_toy};
use adaug::harness::{load_points, EvalReport, RunConfig};

const TINY: &str = "\
episodes = 2
rl_steps = 12
epochs_generator = 3
epochs_detector = 3
batch_size = 32
minibatch = 12
kde_samples = 20
n_experts = 3
k_range_max = 3
epochs_expert = 3
epochs_gate = 3
seed = 5
";

fn adaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaug")).args(args).output().expect("binary runs")
}

fn setup(dir: &Path) -> (String, String) {
    let data = dir.join("toy.csv");
    save_dataset(&synth_sine_toy(60, 12, 0.1, 3).unwrap(), &data).unwrap();
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    (data.display().to_string(), cfg.display().to_string())
}

fn reports(stdout: &[u8]) -> Vec<EvalReport> {
    String::from_utf8_lossy(stdout)
        .lines()
        .map(|l| EvalReport::from_json(l).unwrap())
        .collect()
}

#[test]
fn train_detect_inspect_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(tmp.path());
    let out = tmp.path().join("run");
    let o = adaug(&["train", "--data", &data, "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(reports(&o.stdout).len(), 2);

    let resolved = RunConfig::load(out.join("config.txt")).unwrap();
    assert_eq!(resolved.episodes, 2);
    assert_eq!(resolved.lr_cvae, 0.003);
    assert_eq!(resolved.out_dir.as_deref(), Some(out.as_path()));
    assert!(out.join("model/manifest.json").exists());
    assert!(out.join("model/expert_002.swhy").exists());
    let episodes = fs::read_to_string(out.join("episodes.jsonl")).unwrap();
    assert!((1..=2).contains(&episodes.lines().count()));
    let points = load_points(out.join("points/points.csv")).unwrap();
    assert!(points.len() >= 43);

    let model = out.join("model");
    let o = adaug(&["detect", "--model", model.to_str().unwrap(), "--input", &data, "--threshold", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 73);
    assert!(String::from_utf8_lossy(&o.stderr).contains("auc_roc"));

    let unlabeled = tmp.path().join("rows.csv");
    fs::write(&unlabeled, "x,y\n0.5,0.1\n-1,2\n").unwrap();
    let scores = tmp.path().join("scores.csv");
    let o = adaug(&[
        "detect",
        "--model",
        model.to_str().unwrap(),
        "--input",
        unlabeled.to_str().unwrap(),
        "--variant",
        "single",
        "--out",
        scores.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 3);
    assert!(tmp.path().join("scores.csv.config.txt").exists());

    let o = adaug(&["inspect", "--model", model.to_str().unwrap()]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("single detector") && table.contains("expert 2"));
}

#[test]
fn bench_reports_both_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(tmp.path());
    let o = adaug(&["bench", "--data", &data, "--split", "30/70", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = reports(&o.stdout);
    assert_eq!(r.len(), 2);
    assert_eq!(r[0].samples, 72 - (60 * 3 / 10 + 12 * 3 / 10));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(adaug(&[]).status.code(), Some(1));
    assert_eq!(adaug(&["bench", "--data", "x.csv", "--split", "50/50"]).status.code(), Some(1));
    assert_eq!(adaug(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let (data, _) = setup(tmp.path());
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let o = adaug(&["train", "--data", &data, "--config", bad.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.csv");
    let out = tmp.path().join("o");
    let o = adaug(&["train", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let ragged = tmp.path().join("ragged.csv");
    fs::write(&ragged, "1,2,1\n3,-1\n").unwrap();
    let o = adaug(&["train", "--data", ragged.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = adaug(&["inspect", "--model", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
