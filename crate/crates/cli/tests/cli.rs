use std::path::Path;
use std::process::{Command, Output};

fn ovdkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovdkit"))
        .args(args)
        .env_remove("OVDKIT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ovdkit(args);
    assert!(
        out.status.success(),
        "ovdkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", p(dir), "--scale", "0.05", "--epochs", "2"]);
}

#[test]
fn synth_train_eval_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world");
    synth(&w);
    for f in ["det.json", "eval.json", "pairs.jsonl", "det_only.toml", "det_pairs.toml"] {
        assert!(w.join(f).exists(), "{f}");
    }
    let run = tmp.path().join("run");
    let out = ok(&["train", "--config", p(&w.join("det_pairs.toml")), "--out", p(&run)]);
    assert!(out.contains("steps"));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["loss_total"].is_number() && first["loss_terms"].is_object());
    assert!(run.join("last.ckpt").exists() && run.join("epoch_2.ckpt").exists());

    let report = tmp.path().join("out").join("report.json");
    ok(&[
        "eval",
        "--config",
        p(&w.join("det_pairs.toml")),
        "--ckpt",
        p(&run.join("last.ckpt")),
        "--data",
        p(&w.join("eval.json")),
        "--out",
        p(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for k in ["ap_overall", "ap50", "ar", "ar_agnostic", "ap_per_group.seen", "ap_per_group.unseen"] {
        let v = r[k].as_f64().unwrap_or_else(|| panic!("missing {k}"));
        assert!((0.0..=1.0).contains(&v));
    }

    let png = tmp.path().join("vis.png");
    let out = ok(&[
        "visualize",
        "--ckpt",
        p(&run.join("last.ckpt")),
        "--image",
        p(&w.join("images").join("eval_0.png")),
        "--caption",
        "a red circle next to a blue star",
        "--out",
        p(&png),
    ]);
    let matches: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(matches.as_array().unwrap().len(), 2);
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");
}

#[test]
fn resume_continues_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world");
    synth(&w);
    let cfg = w.join("det_pairs.toml");
    let full = tmp.path().join("full");
    ok(&["train", "--config", p(&cfg), "--out", p(&full)]);
    let part = tmp.path().join("part");
    ok(&["train", "--config", p(&cfg), "--out", p(&part), "--set", "train.max_steps=2"]);
    ok(&["train", "--config", p(&cfg), "--out", p(&part), "--resume", p(&part.join("last.ckpt"))]);
    assert_eq!(
        std::fs::read_to_string(full.join("metrics.jsonl")).unwrap(),
        std::fs::read_to_string(part.join("metrics.jsonl")).unwrap()
    );

    let bad = ovdkit(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("bad")),
        "--resume",
        p(&part.join("last.ckpt")),
        "--set",
        "loss.alpha=5",
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("loss.alpha"));
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world");
    synth(&w);
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_ovdkit"))
        .args(["train", "--config", p(&w.join("det_only.toml")), "--out", p(&run), "--set", "train.max_steps=1"])
        .env("OVDKIT_SEED", "11")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(run.join("config.toml")).unwrap().contains("seed = 11"));
}

#[test]
fn sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world");
    synth(&w);
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--config",
        p(&w.join("det_only.toml")),
        "--axis",
        "wra.tau",
        "--values",
        "0.2,0.5",
        "--out",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("axis,value,") && lines[0].contains("ar_agnostic"));
    assert!(lines[1].starts_with("wra.tau,0.2,"));
    assert!(out.join("01_0.5").join("report.json").exists());
}

#[test]
fn convert_all_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let w = tmp.path().join("world");
    synth(&w);
    let det = tmp.path().join("det.jsonl");
    let out = ok(&["convert", "--kind", "detection", "--in", p(&w.join("det.json")), "--out", p(&det), "--concepts", "6"]);
    assert!(out.contains("wrote 5 triplets"));
    for line in std::fs::read_to_string(&det).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["concepts"].as_array().unwrap().len(), 6);
        assert_eq!(v["kind"], "detection");
    }
    let pairs = tmp.path().join("pairs.jsonl");
    ok(&["convert", "--kind", "pairs", "--in", p(&w.join("pairs.jsonl")), "--out", p(&pairs)]);
    let v: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&pairs).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(v["kind"], "image_text");

    let cls_in = tmp.path().join("cls_in.jsonl");
    let img = w.join("images").join("det_0.png");
    std::fs::write(&cls_in, format!("{{\"image\":{:?},\"category\":\"red circle\"}}\n", p(&img))).unwrap();
    let cls = tmp.path().join("cls.jsonl");
    ok(&["convert", "--kind", "classification", "--in", p(&cls_in), "--out", p(&cls)]);
    assert!(std::fs::read_to_string(&cls).unwrap().contains("\"classification\""));

    let cfg = std::fs::read_to_string(w.join("det_only.toml"))
        .unwrap()
        .replace("detection = \"det.json\"", &format!("detection = {:?}", p(&det)));
    let cfg_path = tmp.path().join("converted.toml");
    std::fs::write(&cfg_path, cfg).unwrap();
    ok(&["train", "--config", p(&cfg_path), "--out", p(&tmp.path().join("run")), "--set", "train.max_steps=1"]);
}

#[test]
fn errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = ovdkit(&["convert", "--kind", "detection", "--in", "/nonexistent/x.json", "--out", p(&tmp.path().join("o"))]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/x.json"));

    let w = tmp.path().join("world");
    synth(&w);
    let unknown = ovdkit(&["train", "--config", p(&w.join("det_only.toml")), "--out", p(&tmp.path().join("r")), "--set", "train.epochz=2"]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("train.epochz"));

    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nepochs = 0\n").unwrap();
    assert!(!ovdkit(&["train", "--config", p(&bad_cfg), "--out", p(&tmp.path().join("r2"))]).status.success());
    assert!(!ovdkit(&["frobnicate"]).status.success());
}
