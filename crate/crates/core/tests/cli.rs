use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metric-forge"));
    c.env_remove("METRIC_FORGE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let flags = [
        "--classes",
        "8",
        "--per-class",
        "50",
        "--dim",
        "32",
        "--spread",
        "0.15",
        "--seed",
        "7",
    ];
    for out in [&a, &b] {
        let o = bin()
            .arg("gen-data")
            .args(flags)
            .args(["--out", s(out)])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("N=400 C=8 D=32"));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 401);
    assert!(text.starts_with("id,label,f0,"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_data_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--classes", "1", "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2 classes"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run(&["gen-data", "--bogus"]).status.code(), Some(2));
}

#[test]
fn train_writes_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("triplet.json");
    let o = run(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).trim_end().lines().last().unwrap().starts_with("recall@1 = "));
    for f in ["history.csv", "embeddings.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,mean_loss,recall_at_1,intra_inter_gap"));
    assert_eq!(history.lines().count(), 21);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["loss"], "triplet");
    assert_eq!(report["num_samples"], 60);
}

#[test]
fn train_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("triplet.json");
    for sub in ["a", "b"] {
        let o = run(&[
            "train",
            "--config",
            s(&cfg),
            "--epochs",
            "5",
            "--out-dir",
            s(&dir.path().join(sub)),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["history.csv", "embeddings.csv", "report.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_env_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_dir().join("example.csv");
    let dump = |env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["train", "--data", s(&data), "--dump-config"]);
        if let Some(v) = env {
            c.env("METRIC_FORGE_SEED", v);
        }
        if let Some(v) = flag {
            c.args(["--seed", v]);
        }
        let o = c.current_dir(dir.path()).output().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(dump(None, None), 0);
    assert_eq!(dump(Some("17"), None), 17);
    assert_eq!(dump(Some("17"), Some("4")), 4);
}

#[test]
fn proxygml_runs_on_three_classes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--data",
        s(&data_dir().join("example.csv")),
        "--loss",
        "proxygml",
        "--M",
        "2",
        "--K",
        "4",
        "--epochs",
        "3",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn npair_with_uniform_sampler_is_rejected() {
    let o = run(&[
        "train",
        "--data",
        s(&data_dir().join("example.csv")),
        "--loss",
        "npair",
        "--sampler",
        "uniform",
        "--dump-config",
    ]);
    // resolution succeeds; the sampler check happens before training
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--data",
        s(&data_dir().join("example.csv")),
        "--loss",
        "npair",
        "--sampler",
        "uniform",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("two_per_class"));
}

#[test]
fn dump_config_lists_every_default() {
    let o = run(&["train", "--loss", "proxy_anchor", "--seed", "2", "--dump-config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["seed"], 2);
    assert_eq!(v["loss"]["anchor_alpha"], 32.0);
    assert_eq!(v["train"]["learning_rate"], 0.05);
    assert_eq!(v["train"]["sampler"], "uniform");
    assert_eq!(v["eval"]["ks"], serde_json::json!([1, 2, 4]));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "{\n  \"schema\": 1,\n  \"epochz\": 3\n}\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.json"));
}

#[test]
fn diverging_run_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"schema": 1, "train": {"normalize_embeddings": false}}"#).unwrap();
    let data = data_dir().join("example.csv");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--lr",
        "1e300",
        "--epochs",
        "5",
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = run(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("proxy_anchor"));
    assert!(text.contains(" 0 failed"));
}

#[test]
fn gradcheck_with_no_seeds_is_empty() {
    let o = run(&["gradcheck", "--seeds", "0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("0 checks, 0 failed"));
}

#[test]
fn gradcheck_detects_injected_fault() {
    let o = run(&["gradcheck", "--seeds", "1", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
}

fn write_clusters(path: &Path) {
    let mut text = String::from("id,label,f0,f1\n");
    let centers = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)];
    let mut id = 0;
    for (label, (x, y)) in centers.iter().enumerate() {
        for j in 0..4 {
            let e = 0.01 * j as f64;
            text.push_str(&format!("{id},{label},{},{}\n", x + e, y - e));
            id += 1;
        }
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn eval_perfect_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    write_clusters(&path);
    let o = run(&["eval", "--embeddings", s(&path), "--ks", "1,2,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let r = &v["recall_at_k"];
    assert_eq!(r["1"], 1.0);
    assert!(r["1"].as_f64() <= r["2"].as_f64() && r["2"].as_f64() <= r["4"].as_f64());

    let out = dir.path().join("r.json");
    assert!(run(&["eval", "--embeddings", s(&path), "--out", s(&out)])
        .status
        .success());
    assert_eq!(std::fs::read(&out).unwrap(), o.stdout);
}

#[test]
fn eval_missing_file_names_the_path() {
    let o = run(&["eval", "--embeddings", "/nonexistent/emb.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/emb.csv"));
}

#[test]
fn eval_malformed_row_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "id,label,f0\n0,0,1.0\n1,0,abc\n").unwrap();
    let o = run(&["eval", "--embeddings", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":3:"), "{}", stderr(&o));
}
