use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrp"))
        .args(args)
        .env_remove("MRP_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mrp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "backbone": {"d_model": 16, "n_heads": 2, "n_layers": 1},
  "mrp": {"depth": 1},
  "train": {"batch_size": 8, "micro_batch": 4, "total_steps": 3},
  "theory": {"trials": 500, "shuffles": 50}
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.json"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn trained(&self) -> (PathBuf, PathBuf, PathBuf) {
        let cfg = self.p("tiny.json");
        let data = self.p("train.tsv");
        ok(&["gen-data", "--out", s(&data), "--count", "40", "--seed", "1"]);
        let bb = self.p("bb");
        ok(&["train-backbone", "--config", s(&cfg), "--data", s(&data), "--out", s(&bb), "--threads", "1"]);
        let g = self.p("g");
        ok(&[
            "train-mrp", "--config", s(&cfg), "--data", s(&data), "--backbone", s(&bb.join("backbone.mrpc")),
            "--out", s(&g), "--threads", "1",
        ]);
        (data, bb.join("backbone.mrpc"), g.join("mrp.mrpc"))
    }
}

#[test]
fn gen_data_counts_and_determinism() {
    let f = Fixture::new();
    let a = f.p("a.tsv");
    let out = ok(&["gen-data", "--out", s(&a), "--count", "100", "--seed", "5"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "100");
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 100);
    let b = f.p("b.tsv");
    ok(&["gen-data", "--out", s(&b), "--count", "100", "--seed", "5"]);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let e = f.p("empty.tsv");
    ok(&["gen-data", "--out", s(&e), "--count", "0"]);
    assert_eq!(std::fs::read_to_string(&e).unwrap(), "");
}

#[test]
fn seed_env_and_flag_precedence() {
    let f = Fixture::new();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let p = f.p(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_mrp"));
        c.args(["gen-data", "--out", s(&p), "--count", "20"]);
        if let Some(v) = env {
            c.env("MRP_SEED", v);
        } else {
            c.env_remove("MRP_SEED");
        }
        if let Some(v) = flag {
            c.args(["--seed", v]);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(p).unwrap()
    };
    let env7 = run("a", Some("7"), None);
    let flag7 = run("b", None, Some("7"));
    let both = run("c", Some("3"), Some("7"));
    let default = run("d", None, None);
    assert_eq!(env7, flag7);
    assert_eq!(both, flag7);
    assert_ne!(default, flag7);
    let bad = Command::new(env!("CARGO_BIN_EXE_mrp"))
        .args(["gen-data", "--out", s(&f.p("e")), "--count", "1"])
        .env("MRP_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let data = f.p("d.tsv");
    ok(&["gen-data", "--out", s(&data), "--count", "4"]);
    let missing = mrp(&["eval", "--backbone", s(&f.p("none.mrpc")), "--data", s(&data), "--out", s(&f.p("o"))]);
    assert_eq!(missing.status.code(), Some(3));
    let depth0 = mrp(&[
        "train-mrp", "--data", s(&data), "--backbone", s(&f.p("none.mrpc")), "--out", s(&f.p("o")), "--depth", "0",
    ]);
    assert_eq!(depth0.status.code(), Some(2));
    let mode = mrp(&["generate", "--backbone", "x", "--prompt", "1+1=", "--mode", "fast"]);
    assert_eq!(mode.status.code(), Some(2));
    std::fs::write(f.p("bad.json"), r#"{"seeed": 1}"#).unwrap();
    let cfg = mrp(&["gen-data", "--config", s(&f.p("bad.json")), "--out", s(&f.p("x.tsv"))]);
    assert_eq!(cfg.status.code(), Some(2));
}

#[test]
fn pipeline_reduction_and_reproducibility() {
    let f = Fixture::new();
    let (data, bb, g) = f.trained();
    for name in ["config.json", "manifest.json", "train_log.csv"] {
        assert!(f.p("bb").join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.p("g").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    let log = std::fs::read_to_string(f.p("g").join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,loss_j1,loss_j2,wall_seconds\n"));

    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--backbone", s(&bb), "--mrp", s(&g), "--prompt", "17+25="];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let base = gen(&["--mode", "baseline"]);
    let spec = gen(&["--mode", "spec", "--k", "0"]);
    assert_eq!(base.stdout, spec.stdout);
    let direct = gen(&["--mode", "direct", "--k", "2", "--tau", "1.0"]);
    let stats = String::from_utf8_lossy(&direct.stderr);
    let fpt: f64 = stats
        .lines()
        .find_map(|l| l.strip_prefix("forwards_per_token "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(fpt < 1.0, "{stats}");

    // Rerun with identical inputs.
    let bb2 = f.p("bb2");
    ok(&[
        "train-backbone", "--config", s(&f.p("tiny.json")), "--data", s(&data), "--out", s(&bb2), "--threads", "1",
    ]);
    assert_eq!(std::fs::read(&bb).unwrap(), std::fs::read(bb2.join("backbone.mrpc")).unwrap());
}

#[test]
fn reports_have_expected_shapes() {
    let f = Fixture::new();
    let (data, bb, g) = f.trained();
    let cfg = f.p("tiny.json");
    let sweep = f.p("sweep");
    ok(&[
        "sweep", "--config", s(&cfg), "--backbone", s(&bb), "--mrp", s(&g), "--data", s(&data), "--out", s(&sweep),
        "--limit", "5",
    ]);
    let table = std::fs::read_to_string(sweep.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 * 4 * 2);

    let depth = f.p("depth");
    ok(&[
        "depth-sweep", "--config", s(&cfg), "--backbone", s(&bb), "--mrp", s(&g), s(&g), "--data", s(&data),
        "--out", s(&depth), "--limit", "3", "--taus", "1.0", "--ks", "0,1",
    ]);
    let table = std::fs::read_to_string(depth.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 2);

    let measure = f.p("measure");
    let out = ok(&[
        "measure", "--config", s(&cfg), "--backbone", s(&bb), "--data", s(&data), "--out", s(&measure),
        "--limit", "10",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let res = std::fs::read_to_string(measure.join("residuals.csv")).unwrap();
    assert_eq!(res.lines().count(), 1 + 2 * 8);

    // The sensitivity bound holds for an essentially untrained backbone.
    let theory = f.p("theory");
    ok(&[
        "theory", "--config", s(&cfg), "--backbone", s(&bb), "--data", s(&data), "--out", s(&theory), "--limit", "10",
    ]);
    let t = std::fs::read_to_string(theory.join("theory.csv")).unwrap();
    assert!(t.starts_with("metric,value,n,flag\n"));
    assert!(t.contains("lipschitz_max_v64"));
    assert!(t.lines().all(|l| !l.ends_with(",violation")), "{t}");

    let eval = f.p("eval");
    ok(&[
        "eval", "--config", s(&cfg), "--backbone", s(&bb), "--mrp", s(&g), "--data", s(&data), "--out", s(&eval),
        "--mode", "spec", "--k", "2", "--r", "1", "--limit", "5",
    ]);
    assert_eq!(std::fs::read_to_string(eval.join("table.csv")).unwrap().lines().count(), 2);
}
