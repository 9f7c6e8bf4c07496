use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zfn::metrics::MetricTable;
use zfn::recon::Label;

fn zfn(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zfn"));
    cmd.args(args).env_remove("ZFN_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&mut zfn(&["synth", "generate", "--out", p(&data)]));
    data
}

/// Manifest with the first `n` normal and `n` abnormal test rows.
fn small_manifest(data: &Path, n: usize) -> PathBuf {
    let text = fs::read_to_string(data.join("test_manifest.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let rows: Vec<&str> = lines.collect();
    let mut out = vec![header];
    for label in ["0", "1"] {
        out.extend(rows.iter().filter(|r| r.split(',').nth(2) == Some(label)).take(n));
    }
    let path = data.join("small_manifest.csv");
    fs::write(&path, out.join("\n") + "\n").unwrap();
    path
}

fn metric_table(path: &Path) {
    let rows: Vec<(String, Label, Vec<Option<f64>>)> = (0..24)
        .map(|i| {
            let label = if i % 3 == 0 { Label::Abnormal } else { Label::Normal };
            let signal = if label.is_abnormal() { 1.0 } else { 0.0 };
            let x = vec![
                Some(signal + (i % 5) as f64 * 0.1),
                Some(((i * 7) % 11) as f64),
                Some(2.0),
                None,
            ];
            (format!("img{i:02}"), label, x)
        })
        .collect();
    MetricTable::from_rows(&["a", "b", "constant", "absent"], &rows)
        .unwrap()
        .save_csv(path)
        .unwrap();
}

#[test]
fn synth_ingest_mask_localize() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    for f in ["reconstruction.png", "ground_truth.json", "spec.json", "mask_manifest.csv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&mut zfn(&["ingest", "--manifest", p(&data.join("test_manifest.csv"))]))).unwrap();
    assert_eq!(summary["pairs"], 90);
    assert_eq!(summary["abnormal"], 30);
    assert_eq!((summary["height"].as_u64(), summary["channels"].as_u64()), (Some(64), Some(1)));

    let mask = dir.path().join("mask.zfnt");
    ok(&mut zfn(&["mask", "build", "--manifest", p(&data.join("mask_manifest.csv")), "--out", p(&mask)]));
    let overlay = dir.path().join("overlay.png");
    let json = ok(&mut zfn(&[
        "localize",
        "--original",
        p(&data.join("test/abnormal_0000.png")),
        "--reconstruction",
        p(&data.join("reconstruction.png")),
        "--mask",
        p(&mask),
        "--q",
        "5",
        "--overlay",
        p(&overlay),
    ]));
    let cands: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    assert_eq!(cands.len(), 5);
    let scores: Vec<f64> = cands.iter().map(|c| c["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(overlay.exists());
}

#[test]
fn reconstruct_writes_an_ingestible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let inputs = data.join("inputs.csv");
    fs::write(&inputs, "path,label\ntest/normal_0000.png,0\ntest/abnormal_0000.png,1\n").unwrap();
    let out = dir.path().join("recon");
    ok(&mut zfn(&["reconstruct", "--train-dir", p(&data.join("train")), "--inputs", p(&inputs), "--out", p(&out)]));
    assert!(out.join("abnormal_0000_rec.png").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&mut zfn(&["ingest", "--manifest", p(&out.join("manifest.csv"))]))).unwrap();
    assert_eq!((summary["pairs"].as_u64(), summary["abnormal"].as_u64()), (Some(2), Some(1)));
}

#[test]
fn metrics_extract_small_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let manifest = small_manifest(&data, 2);
    let out = dir.path().join("metrics.csv");
    ok(&mut zfn(&["metrics", "extract", "--manifest", p(&manifest), "--out", p(&out)]));
    let table = MetricTable::load_csv(&out).unwrap();
    assert_eq!(table.len(), 4);
    assert!(table.schema().iter().all(|c| !c.starts_with("msk.")));
    let mask = dir.path().join("mask.zfnt");
    ok(&mut zfn(&["mask", "build", "--manifest", p(&data.join("mask_manifest.csv")), "--m", "5", "--out", p(&mask)]));
    let masked = dir.path().join("masked.csv");
    ok(&mut zfn(&["metrics", "extract", "--manifest", p(&manifest), "--mask", p(&mask), "--out", p(&masked)]));
    let table = MetricTable::load_csv(&masked).unwrap();
    assert!(table.schema().iter().any(|c| c.starts_with("msk.")));
}

#[test]
fn score_fit_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.csv");
    metric_table(&metrics);
    let model = dir.path().join("model.json");
    let fit = |out: &Path, seed_flag: bool| {
        let mut cmd = zfn(&["score", "fit", "--metrics", p(&metrics), "--out", p(out), "--iterations", "12", "--folds", "3"]);
        if seed_flag {
            cmd.args(["--seed", "5"]);
        } else {
            cmd.env("ZFN_SEED", "5");
        }
        ok(&mut cmd);
    };
    fit(&model, true);
    let from_env = dir.path().join("model_env.json");
    fit(&from_env, false);
    assert_eq!(fs::read(&model).unwrap(), fs::read(&from_env).unwrap());

    let scores = ok(&mut zfn(&["score", "predict", "--model", p(&model), "--metrics", p(&metrics)]));
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "image_id,score,flag_std,flag_zfn");
    assert_eq!(lines.len(), 25);

    let report_dir = dir.path().join("report");
    ok(&mut zfn(&["evaluate", "--model", p(&model), "--metrics", p(&metrics), "--out", p(&report_dir)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["record_count"], 24);
    assert!(report_dir.join("report.md").exists());
    let kept: Vec<&str> = report["feature_importance"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["name"].as_str().unwrap())
        .collect();
    assert!(!kept.contains(&"constant") && !kept.contains(&"absent"));
}

#[test]
fn loss_check_prints_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("loss.json");
    fs::write(
        &inputs,
        r#"{"encoded":[0,0],"quantized":[1,1],"disc_score_original":0.5,"disc_score_reconstruction":0.5,"grad_norm_rec":1,"grad_norm_gan":0}"#,
    )
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(&mut zfn(&["loss", "check", "--inputs", p(&inputs)]))).unwrap();
    assert_eq!(v["quantization_distance"], 2.0);
    assert_eq!(v["adaptive_lambda"], 1e6);
    assert!((v["gan_loss"].as_f64().unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!(v.get("vq_loss").is_none());
}

#[test]
fn failures_exit_with_stage_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = |cmd: &mut Command| run(cmd).status.code();

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&mut zfn(&["run", "--config", p(&missing), "--out", p(&out)])), Some(2));
    assert_eq!(code(zfn(&["run", "--out", p(&out)]).env("ZFN_SEED", "abc")), Some(2));

    let data = synth(dir.path());
    let mask_manifest = data.join("mask_manifest.csv");
    let too_many = zfn(&["mask", "build", "--manifest", p(&mask_manifest), "--m", "31", "--out", p(&out)]).output();
    assert_eq!(too_many.unwrap().status.code(), Some(4));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "path,label\nx.png,0\n").unwrap();
    assert_eq!(code(&mut zfn(&["ingest", "--manifest", p(&bad)])), Some(3));

    // the same images listed for mask building and scoring
    let cfg = dir.path().join("overlap.json");
    let body = serde_json::json!({
        "data": {"source": "manifest", "test_manifest": mask_manifest, "mask_manifest": mask_manifest}
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let overlap = run(&mut zfn(&["run", "--config", p(&cfg), "--out", p(&out)]));
    assert_eq!(overlap.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&overlap.stderr).contains("both mask building and scoring"));
}
