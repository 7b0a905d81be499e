use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hfres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfres"))
        .args(args)
        .env_remove("HFRES_DATA_DIR")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{"alpha": 0.25, "resolutions": {{"low": 16, "high": 32}},
            "data": {{"dataset": "synthetic", "limits": {{"train": 96, "eval": 64}}}},
            "train": {{"epochs": 1, "batch_size": 32, "lr_decay_epochs": [1]}},
            "output_dir": "{}"{extra}}}"#,
        dir.join("out").display()
    );
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_sweep_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", "");
    let out = dir.path().join("out");
    ok(&hfres(&["train", "--config", s(&cfg)]));
    for f in ["resolved_config.json", "checkpoint.mshf", "train_log.csv", "graph.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ck = out.join("checkpoint.mshf");
    ok(&hfres(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck)]));
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "n,acc_L,acc_H");
    let acc_low: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();

    let printed = ok(&hfres(&["sweep", "--config", s(&cfg), "--checkpoint", s(&ck), "--budget-mmacs", "0.2"]));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 103);
    let t0: f64 = printed
        .lines()
        .find(|l| l.starts_with("threshold 0 "))
        .unwrap()
        .split_whitespace()
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(t0, acc_low);
    assert!(printed.contains("budget 0.2 MMACs"));
    assert!(out.join("records.csv").is_file() && out.join("regions.csv").is_file());

    ok(&hfres(&["train", "--baseline", "--config", s(&cfg)]));
    let bck = out.join("baseline_checkpoint.mshf");
    assert!(bck.is_file() && out.join("baseline_train_log.csv").is_file());
    ok(&hfres(&[
        "analyze-freq", "--config", s(&cfg), "--checkpoint", s(&ck), "--baseline-checkpoint", s(&bck),
        "--probe-size", "16",
    ]));
    let spectra = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("spectrum_"))
        .count();
    assert_eq!(spectra, 6);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("freq_report.json")).unwrap()).unwrap();
    assert!(report["hf_ratio_residual"].is_f64());

    // the baseline checkpoint belongs to a different network
    let mismatch = hfres(&["eval", "--config", s(&cfg), "--checkpoint", s(&bck)]);
    assert_eq!(mismatch.status.code(), Some(4));
}

#[test]
fn reruns_are_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = write_config(d.path(), "cfg.json", "");
        ok(&hfres(&["train", "--config", s(&cfg)]));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/train_log.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let ck = |d: &tempfile::TempDir| std::fs::read(d.path().join("out/checkpoint.mshf")).unwrap();
    assert_eq!(ck(&a), ck(&b));
}

#[test]
fn resume_continues_the_log() {
    let a = tempfile::tempdir().unwrap();
    let two = r#", "seed": 3"#;
    let cfg2 = write_config(a.path(), "cfg.json", two).to_str().unwrap().to_string();
    std::fs::write(&cfg2, std::fs::read_to_string(&cfg2).unwrap().replace("\"epochs\": 1", "\"epochs\": 2")).unwrap();
    ok(&hfres(&["train", "--config", &cfg2]));

    let b = tempfile::tempdir().unwrap();
    let cfg1 = write_config(b.path(), "cfg1.json", two);
    ok(&hfres(&["train", "--config", s(&cfg1)]));
    let cfg2b = b.path().join("cfg2.json");
    std::fs::write(&cfg2b, std::fs::read_to_string(&cfg1).unwrap().replace("\"epochs\": 1", "\"epochs\": 2")).unwrap();
    let ck = b.path().join("out/checkpoint.mshf");
    ok(&hfres(&["train", "--config", s(&cfg2b), "--resume", s(&ck)]));

    let log = |d: &Path| std::fs::read_to_string(d.join("out/train_log.csv")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    assert_eq!(log(b.path()).lines().count(), 3);
}

#[test]
fn flops_scale_with_width() {
    let dir = tempfile::tempdir().unwrap();
    let total = |alpha: &str| -> f64 {
        let cfg = dir.path().join(format!("m{alpha}.json"));
        std::fs::write(
            &cfg,
            format!(
                r#"{{"arch": "mini-mobilenet", "alpha": {alpha}, "output_dir": "{}"}}"#,
                dir.path().join(alpha).display()
            ),
        )
        .unwrap();
        ok(&hfres(&["flops", "--config", s(&cfg)]));
        let v: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(alpha).join("costs.json")).unwrap(),
        )
        .unwrap();
        v["total_mmacs"].as_f64().unwrap()
    };
    let ratio = total("0.5") / total("1.0");
    assert!(ratio > 0.25 && ratio <= 0.5, "{ratio}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"alpha": 2.0}"#).unwrap();
    let out = hfres(&["flops", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));

    std::fs::write(&bad, r#"{"alhpa": 0.5}"#).unwrap();
    assert_eq!(hfres(&["flops", "--config", s(&bad)]).status.code(), Some(1));

    let cifar = dir.path().join("cifar.json");
    std::fs::write(&cifar, format!(r#"{{"output_dir": "{}"}}"#, dir.path().join("o").display())).unwrap();
    let out = hfres(&["train", "--config", s(&cifar), "--data-dir", s(&dir.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(hfres(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hfres(&["--help"]).status.code(), Some(0));
}
