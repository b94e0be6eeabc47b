use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metaprune::netdef::builtin_template;
use metaprune::pruningnet::{Mode, PruningNet};
use metaprune::report::Results;

const CONFIG: &str = r#"{
  "data": {"synth": {"classes": 4, "per_class": 40, "shape": [3, 8, 8], "noise": 1.0, "seed": 3},
           "synth_test_per_class": 20},
  "train": {"epochs": 24, "batch_size": 16},
  "search": {"population": 16, "top_k": 4, "mutations": 8, "crossovers": 8, "iterations": 4},
  "eval": {"holdout_per_class": 10, "calib_images": 64}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metaprune"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
        Work { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Trains a meta-network on the synthetic set.
    fn train_meta(&self, ckpt: &str, extra: &[&str]) -> PathBuf {
        let config = self.arg("config.json");
        let out = self.arg(ckpt);
        let mut args = vec!["--config", &config, "train-meta", "--template", "chain-small", "--out", &out, "--seed", "1"];
        args.extend(extra);
        ok(&args);
        self.path(ckpt)
    }
}

#[test]
fn missing_template_exits_2_and_names_path() {
    let w = Work::new();
    let missing = w.arg("nowhere/template.json");
    let out = run(&["train-meta", "--template", &missing, "--out", &w.arg("x.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
    let out = run(&["flops", "--template", &missing, "--gene", "full"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2() {
    let w = Work::new();
    std::fs::write(w.path("bad.json"), r#"{"serach": {}}"#).unwrap();
    let out = run(&["--config", &w.arg("bad.json"), "flops", "--template", "chain-small", "--gene", "full"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flops_reference_counts() {
    let full: f64 = ok(&["flops", "--template", "mobilenet-v1-224", "--gene", "full"]).trim().parse().unwrap();
    assert!((full / 569e6 - 1.0).abs() < 0.02, "{full}");
    for (r, want) in [("0.75", 325e6), ("0.5", 149e6), ("0.25", 41e6)] {
        let g = format!("uniform:{r}");
        let f: f64 = ok(&["flops", "--template", "mobilenet-v1-224", "--gene", &g]).trim().parse().unwrap();
        assert!((f / want - 1.0).abs() < 0.02, "{r}: {f}");
    }
    let out = run(&["flops", "--template", "chain-small", "--gene", "1/2/3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epoch_checkpoint_is_initialization() {
    let w = Work::new();
    let ckpt = w.train_meta("p.ckpt", &["--epochs", "0"]);
    let t = builtin_template("chain-small").unwrap().adapted([3, 8, 8], 4).unwrap();
    let init = PruningNet::new(&t, Mode::Predict, 1).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), init.to_checkpoint().encode());
}

#[test]
fn training_is_reproducible() {
    let w = Work::new();
    let a = w.train_meta("a.ckpt", &["--epochs", "1"]);
    let b = w.train_meta("b.ckpt", &["--epochs", "1"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    let metrics = std::fs::read_to_string(w.path("a.ckpt.metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,mean_loss,lr\n0,"));
}

fn search(w: &Work, ckpt: &Path, constraint: &str, out: &str, extra: &[&str]) -> Output {
    let config = w.arg("config.json");
    let ckpt = ckpt.to_string_lossy();
    let out = w.arg(out);
    let mut args = vec!["--config", &config, "search", "--ckpt", &ckpt, "--constraint", constraint, "--out", &out];
    args.extend(extra);
    run(&args)
}

#[test]
fn search_pipeline() {
    let w = Work::new();
    let ckpt = w.train_meta("p.ckpt", &[]);
    let template = w.arg("p.ckpt.template.json");

    let out = search(&w, &ckpt, "flops:1", "none.json", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));

    // unconstrained: at least as good as every uniform width multiplier
    let out = search(&w, &ckpt, "flops:10^18", "free.json", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let free = Results::load(&w.path("free.json")).unwrap();
    let config = w.arg("config.json");
    let ck = ckpt.to_string_lossy();
    for r in ["0.25", "0.5", "0.75", "1"] {
        let g = format!("uniform:{r}");
        let acc: f64 = ok(&["--config", &config, "evaluate", "--ckpt", &ck, "--gene", &g]).trim().parse().unwrap();
        assert!(free.subval_accuracy.unwrap() >= acc, "uniform {r}: {acc} > {:?}", free.subval_accuracy);
    }
    let history = std::fs::read_to_string(w.path("free.json.history.csv")).unwrap();
    assert!(history.starts_with("iter,best_acc,best_cost,gene\n"));

    // binding budget: the emitted gene is re-checked
    let full: u64 = ok(&["flops", "--template", &template, "--gene", "full"]).trim().parse().unwrap();
    let budget = full / 2;
    let c = format!("flops:{budget}");
    let out = search(&w, &ckpt, &c, "half.json", &[]);
    assert!(out.status.success());
    let half = Results::load(&w.path("half.json")).unwrap();
    let g = half.gene.to_string();
    let f: u64 = ok(&["flops", "--template", &template, "--gene", &g]).trim().parse().unwrap();
    assert_eq!(f, half.flops);
    assert!(f < budget);

    // worker count does not change the outcome
    let out = search(&w, &ckpt, &c, "half4.json", &["--workers", "4"]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(w.path("half.json.history.csv")).unwrap(),
        std::fs::read(w.path("half4.json.history.csv")).unwrap()
    );

    // final training fills in the test accuracy
    let res = w.arg("half.json");
    let acc: f64 = ok(&["--config", &config, "train-final", "--template", "chain-small", "--results", &res, "--epochs", "2"])
        .trim()
        .parse()
        .unwrap();
    assert_eq!(Results::load(&w.path("half.json")).unwrap().test_accuracy, Some(acc));

    // latency budget through a generated table
    let table = w.arg("lat.csv");
    ok(&["latency-gen", "--template", &template, "--a", "0.5", "--b", "0.001", "--out", &table]);
    let c = format!("latency:{table}:60");
    let out = search(&w, &ckpt, &c, "lat.json", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Results::load(&w.path("lat.json")).unwrap().latency_us.unwrap() < 60.0);
}

#[test]
fn visualize_full_gene() {
    let w = Work::new();
    let r = Results {
        template: "mobilenet-v2-224".into(),
        gene: builtin_template("mobilenet-v2-224").unwrap().full_gene(),
        flops: 0,
        latency_us: None,
        constraint: None,
        subval_accuracy: None,
        test_accuracy: None,
    };
    r.save(&w.path("r.json")).unwrap();
    ok(&["visualize", "--results", &w.arg("r.json"), "--out", &w.arg("v.csv")]);
    let csv = std::fs::read_to_string(w.path("v.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer_id,is_downsampling,channels,max_channels"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], f[3], "{line}");
    }
}
