use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qnncert_core::data::{two_band_dataset, Dataset};
use qnncert_core::fixedpoint::{QFormat, QTensor};
use qnncert_core::io::idx::{encode_images, save_idx};
use qnncert_core::io::model::{load_model, save_model};
use qnncert_core::network::{Activation, AffineLayer, Layer, QNetwork};
use tempfile::TempDir;

fn qnncert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnncert"))
        .args(args)
        .env_remove("QNNCERT_WORKERS")
        .output()
        .expect("run qnncert")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_error(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("error line on stderr");
    serde_json::from_str(line).expect("stderr is json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Files {
    dir: TempDir,
}

impl Files {
    fn new() -> Self {
        Files {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn idx(&self, name: &str, data: &Dataset) -> (PathBuf, PathBuf) {
        let (i, l) = (self.path(&format!("{name}-images")), self.path(&format!("{name}-labels")));
        save_idx(data, &i, &l).unwrap();
        (i, l)
    }
}

fn tiny_config(files: &Files, extra: &str) -> PathBuf {
    let text = format!(
        r#"
[data]
source = "two_band"
samples = 200
seed = 3

[model]
arch = "tiny-dense"

[train]
batch_size = 32
pretrain_steps = 60
pretrain_lr = 0.01
total_steps = 60
learning_rate = 0.002
eps_target = 4.0
log_every = 20
{extra}
[output]
model = "model.json"
metrics = "metrics.csv"
checkpoint = "ckpt.json"
"#
    );
    let p = files.path("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Trained tiny model plus two-band test files.
fn trained(files: &Files) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = tiny_config(files, "");
    let o = qnncert(&["train", s(&cfg), "-q"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (i, l) = files.idx("test", &two_band_dataset(40, 9));
    (files.path("model.json"), i, l)
}

fn report(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).expect("report json")
}

#[test]
fn train_writes_model_metrics_and_checkpoint() {
    let files = Files::new();
    let (model, _, _) = trained(&files);
    let net = load_model(&model).unwrap();
    assert_eq!(net.input_shape(), &[2]);
    assert_eq!(net.class_count(), 2);
    let csv = std::fs::read_to_string(files.path("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,eps,clean_acc,certified_frac,saturated_neuron_frac"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 6));
    assert_eq!(rows[0][0], "20");
    assert_eq!(rows[0][4], "");
    assert_eq!(rows[5][0], "120");
    assert_eq!(rows[5][2], "4");
    assert!(!rows[5][4].is_empty());
    assert!(files.path("ckpt.json").exists());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let whole = Files::new();
    trained(&whole);
    let split = Files::new();
    let cfg = tiny_config(&split, "");
    let first = qnncert(&["train", s(&cfg), "-q", "--max-steps", "75"]);
    assert!(first.status.success());
    assert!(!split.path("model.json").exists());
    let ckpt = split.path("ckpt.json");
    let second = qnncert(&["train", s(&cfg), "-q", "--resume", s(&ckpt)]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    for f in ["model.json", "ckpt.json", "metrics.csv"] {
        assert_eq!(
            std::fs::read(whole.path(f)).unwrap(),
            std::fs::read(split.path(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_eps_certified_accuracy_equals_clean_accuracy() {
    let files = Files::new();
    let (model, i, l) = trained(&files);
    let v = qnncert(&["verify", "--model", s(&model), "--images", s(&i), "--labels", s(&l), "--eps", "0"]);
    assert_eq!(v.status.code(), Some(0));
    let r = report(&v);
    let e = qnncert(&["eval", "--model", s(&model), "--images", s(&i), "--labels", s(&l)]);
    let acc: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert_eq!(r["certified_robust_accuracy"], acc["accuracy"]);
    assert_eq!(r["robust_count"], r["total"]);
}

#[test]
fn limit_baseline_and_exit_codes() {
    let files = Files::new();
    let (model, i, l) = trained(&files);
    let base = ["--model", s(&model), "--images", s(&i), "--labels", s(&l)];
    let run = |extra: &[&str]| {
        let mut a = vec!["verify"];
        a.extend_from_slice(&base);
        a.extend_from_slice(extra);
        qnncert(&a)
    };
    let limited = report(&run(&["--eps", "2", "--limit", "7"]));
    assert_eq!(limited["total"], 7);
    assert_eq!(limited["samples"].as_array().unwrap().len(), 7);

    let full = run(&["--eps", "60", "--timeout", "0"]);
    let b = run(&["--eps", "60", "--timeout", "0", "--baseline"]);
    let (rf, rb) = (report(&full), report(&b));
    assert!(rb["undecided_count"].as_u64() >= rf["undecided_count"].as_u64());
    assert_eq!(rf["undecided_count"], 0);
    // Points near the class boundary have witnesses at this radius.
    assert!(rf["vulnerable_count"].as_u64().unwrap() > 0);
    assert_eq!(full.status.code(), Some(10));
    if rb["undecided_count"].as_u64().unwrap() > 0 {
        assert_eq!(b.status.code(), Some(11));
    }
    let budget = run(&["--eps", "60", "--timeout", "0", "--max-regions", "1"]);
    let rbud = report(&budget);
    assert!(rbud["samples"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s["regions_processed"].as_u64().unwrap() <= 1));
}

#[test]
fn deterministic_reports_are_byte_identical() {
    let files = Files::new();
    let (model, i, l) = trained(&files);
    let args = [
        "verify", "--model", s(&model), "--images", s(&i), "--labels", s(&l), "--eps", "20", "--deterministic",
    ];
    let a = qnncert(&args);
    let b = qnncert(&args);
    assert_eq!(a.stdout, b.stdout);
    assert!(!stdout(&a).contains("wall_time"));
    // Aggregates agree with the per-sample records.
    let r = report(&a);
    let samples = r["samples"].as_array().unwrap();
    let robust = samples.iter().filter(|s| s["verdict"] == "robust").count();
    assert_eq!(r["robust_count"], robust);
    let again: serde_json::Value = serde_json::from_str(&r.to_string()).unwrap();
    assert_eq!(again, r);
}

fn zero_model(files: &Files) -> PathBuf {
    let f = QFormat::unsigned(0, 8);
    let w = QTensor::zeros(vec![10, 4], QFormat::signed(2, 6));
    let b = QTensor::zeros(vec![10], QFormat::signed(5, 3));
    let layer = AffineLayer::dense(w, b, 0, 32, 0, Activation::Identity).unwrap();
    let net = QNetwork::new(vec![1, 2, 2], f, vec![Layer::Flatten, Layer::Affine(layer)]).unwrap();
    let p = files.path("zero.json");
    save_model(&net, &p).unwrap();
    p
}

fn balanced(copies: usize) -> Dataset {
    let labels: Vec<usize> = (0..copies).flat_map(|_| 0..10).collect();
    let raw = (0..labels.len() * 4).map(|i| (i * 37 % 256) as i64).collect();
    Dataset::new(vec![1, 2, 2], QFormat::unsigned(0, 8), raw, labels, 10).unwrap()
}

#[test]
fn eval_constant_classifier_and_duplication() {
    let files = Files::new();
    let model = zero_model(&files);
    let acc = |name: &str, copies| {
        let (i, l) = files.idx(name, &balanced(copies));
        let o = qnncert(&["eval", "--model", s(&model), "--images", s(&i), "--labels", s(&l)]);
        assert!(o.status.success());
        serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap()["accuracy"].as_f64().unwrap()
    };
    assert_eq!(acc("one", 3), 0.1);
    assert_eq!(acc("two", 6), 0.1);
}

#[test]
fn construct_reports_certificate() {
    let files = Files::new();
    let out = files.path("c.json");
    let o = qnncert(&["construct", "--points", "32:1,96:0", "--eps", "8", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("ROBUST at 2/2 points"));
    let net = load_model(&out).unwrap();
    assert!(net.hidden_neurons() <= 5 * 2 * 17);

    let exact = files.path("e.json");
    let o = qnncert(&["construct", "--points", "3:0 4:1 5:2", "--eps", "0", "--out", s(&exact)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("exact fit at 3/3 points"));

    let pts = files.path("pts.txt");
    std::fs::write(&pts, "10:0\n30:1\n").unwrap();
    let o = qnncert(&["construct", "--points", s(&pts), "--eps", "5", "--out", s(&files.path("f.json"))]);
    assert!(stdout(&o).contains("ROBUST at 2/2 points"));
}

#[test]
fn construct_gap_violation_writes_nothing() {
    let files = Files::new();
    let out = files.path("g.json");
    let o = qnncert(&["construct", "--points", "10:0,18:1", "--eps", "5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(8));
    assert_eq!(stderr_error(&o)["error"], "gap_violation");
    assert!(!out.exists());
}

#[test]
fn error_paths_are_machine_readable() {
    let files = Files::new();
    let model = zero_model(&files);
    let (i, l) = files.idx("d", &balanced(1));

    let o = qnncert(&["eval", "--model", s(&files.path("missing.json")), "--images", s(&i), "--labels", s(&l)]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_error(&o)["error"], "io_error");

    let bytes = encode_images(2, 2, &[0; 40]);
    let cut = files.path("cut");
    std::fs::write(&cut, &bytes[..30]).unwrap();
    let o = qnncert(&["eval", "--model", s(&model), "--images", s(&cut), "--labels", s(&l)]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(stderr_error(&o)["error"], "truncated_file");

    let o = qnncert(&["eval", "--model", s(&model), "--images", s(&l), "--labels", s(&l)]);
    assert_eq!(stderr_error(&o)["error"], "bad_magic");

    let v2 = files.path("v2.json");
    let text = std::fs::read_to_string(&model).unwrap().replacen("\"version\": 1", "\"version\": 2", 1);
    std::fs::write(&v2, text).unwrap();
    let o = qnncert(&["eval", "--model", s(&v2), "--images", s(&i), "--labels", s(&l)]);
    assert_eq!(o.status.code(), Some(6));
    assert_eq!(stderr_error(&o)["error"], "model_format");

    let (wi, wl) = files.idx("wide", &two_band_dataset(10, 1));
    let o = qnncert(&["eval", "--model", s(&model), "--images", s(&wi), "--labels", s(&wl)]);
    assert_eq!(o.status.code(), Some(7));
    assert_eq!(stderr_error(&o)["error"], "shape_error");

    let cfg = tiny_config(&files, "weight_decay = -1.0\n");
    let o = qnncert(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr_error(&o);
    assert_eq!(e["error"], "config_error");
    assert!(e["message"].as_str().unwrap().contains("train.weight_decay"));

    let o = qnncert(&["verify", "--model", s(&model)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"], "usage");
}

#[test]
fn workers_default_comes_from_environment() {
    let files = Files::new();
    let model = zero_model(&files);
    let (i, l) = files.idx("d", &balanced(1));
    let o = Command::new(env!("CARGO_BIN_EXE_qnncert"))
        .args(["verify", "--model", s(&model), "--images", s(&i), "--labels", s(&l), "--eps", "1"])
        .env("QNNCERT_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_error(&o)["message"].as_str().unwrap().contains("workers"));
}

#[test]
fn selftest_passes() {
    let o = qnncert(&["selftest", "--instances", "30", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["passed"], true);
}
