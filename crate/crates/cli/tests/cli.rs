use std::path::Path;
use std::process::{Command, Output};

fn fido(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fido"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/small.toml")
        .display()
        .to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: usize) {
    let o = fido(&["synth-data", "--seed", "2", "--n", &n.to_string(), "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let cfg = small_config();
    let mut args = vec!["train", "--config", &cfg, "--out", dir.to_str().unwrap(), "--seed", "4"];
    args.extend_from_slice(extra);
    fido(&args)
}

#[test]
fn synth_then_train_writes_checkpoint_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, 6);
    let o = train(d, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["best.ckpt", "trace.csv", "config.json"] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,total,L_int,L_haspi,L_ce\n"));
    // 6 train records, batch 1: one row per step
    assert!(trace.lines().count() > 6);
}

#[test]
fn rerun_gives_identical_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        synth(d, 4);
        let o = train(d, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ta = std::fs::read(a.join("trace.csv")).unwrap();
    let tb = std::fs::read(b.join("trace.csv")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn predict_evaluate_and_attention_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("run");
    synth(&d, 4);
    assert!(train(&d, &[]).status.success());
    let ck = d.join("best.ckpt");
    let man = d.join("manifest.jsonl");
    let (ck, man) = (ck.to_str().unwrap(), man.to_str().unwrap());

    let p = tmp.path().join("pred");
    let o = fido(&["predict", "--checkpoint", ck, "--manifest", man, "--out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(p.join("predictions.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let s = v["intelligibility"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&s));
        let h = v["haspi"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&h));
        assert!(v["class"].as_u64().unwrap() < 10);
        assert!(v["id"].is_string());
    }

    let e = tmp.path().join("eval");
    let o = fido(&["evaluate", "--checkpoint", ck, "--manifest", man, "--out", e.to_str().unwrap(), "--track", "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["tracks"]["all"]["n"], 4);
    assert!(e.join("predictions.csv").is_file());

    let a = tmp.path().join("attn");
    let o = fido(&["attn-stats", "--checkpoint", ck, "--manifest", man, "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(a.join("attention_stats.csv")).unwrap();
    // 4 utterances × 16 frames × {before, after}
    assert_eq!(csv.lines().count(), 1 + 4 * 16 * 2);
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = fido(&["train", "--out", "/nonexistent", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(fido(&["--help"]).status.code(), Some(0));
    assert_eq!(fido(&["--version"]).status.code(), Some(0));
}

#[test]
fn off_grid_stft_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fido(&["train", "--out", tmp.path().to_str().unwrap(), "--stft", "512,400"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("50"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_data_error_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 2);
    let ck = tmp.path().join("absent.ckpt");
    let out = tmp.path().join("ev");
    let o = fido(&[
        "evaluate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        tmp.path().join("manifest.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.ckpt"), "{}", stderr(&o));
}

#[test]
fn missing_file_embeddings_are_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 2);
    let emb = tmp.path().join("emb");
    std::fs::create_dir(&emb).unwrap();
    let o = fido(&["train", "--out", tmp.path().to_str().unwrap(), "--provider", "file", "--emb-dir", emb.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("synth_0000"), "{}", stderr(&o));
}

#[test]
fn extract_caches_and_inspect_reads_headers() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 2);
    let out = tmp.path().join("feat");
    let args = [
        "extract",
        "--config",
        &small_config(),
        "--manifest",
        tmp.path().join("manifest.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]
    .map(String::from);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = fido(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut files: Vec<_> = std::fs::read_dir(out.join("cache")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 8);
    let before: Vec<_> = files.iter().map(|f| std::fs::metadata(f).unwrap().modified().unwrap()).collect();
    assert!(fido(&args).status.success());
    let after: Vec<_> = files.iter().map(|f| std::fs::metadata(f).unwrap().modified().unwrap()).collect();
    assert_eq!(before, after, "cache entries were rewritten");

    let o = fido(&["inspect-emb", files[0].to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("T=16") && text.contains("(ok)"), "{text}");

    let bad = tmp.path().join("bad.femb");
    std::fs::write(&bad, b"FIDOEMB1").unwrap();
    assert_eq!(fido(&["inspect-emb", bad.to_str().unwrap()]).status.code(), Some(2));
}
