use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_continual-anomaly"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, tasks: &str) {
    let o = bin(&[
        "synth",
        "--out",
        s(out),
        "--tasks",
        tasks,
        "--train-images",
        "6",
        "--test-normal",
        "3",
        "--test-anomalous",
        "3",
        "--image-size",
        "16",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8(o.stdout).unwrap().trim(),
        s(&out.join("manifest.json"))
    );
}

#[test]
fn bench_is_deterministic_and_reports_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "5");
    let manifest = data.join("manifest.json");
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = bin(&[
            "bench",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--seed",
            "7",
            "--epochs",
            "3",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(
            String::from_utf8(o.stdout).unwrap().trim(),
            s(&out.join("report.json"))
        );
        for f in [
            "report.csv",
            "matrices/image_auroc.csv",
            "results.csv",
            "traces/task_004.csv",
            "bank/index.json",
        ] {
            assert!(out.join(f).is_file(), "{f}");
        }
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let json: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(json["tasks"].as_array().unwrap().len(), 5);
    assert!(json["forgetting"]["image_auroc"].is_number());
}

#[test]
fn train_then_eval_matches_bench_final_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2");
    let manifest = data.join("manifest.json");
    let (t, b) = (dir.path().join("t"), dir.path().join("b"));
    let o = bin(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&t),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), s(&t.join("bank")));
    let o = bin(&["eval", "--manifest", s(&manifest), "--out", s(&t)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&[
        "bench",
        "--manifest",
        s(&manifest),
        "--out",
        s(&b),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(t.join("results.csv")).unwrap(),
        fs::read_to_string(b.join("results.csv")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = bin(&["train", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    assert!(o.stdout.is_empty());

    assert_eq!(bin(&["bench", "--nope"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));

    // a malformed index is a validation failure; a corrupt tensor is a runtime one
    let data = dir.path().join("data");
    synth(&data, "1");
    let bank = dir.path().join("bank");
    fs::create_dir_all(&bank).unwrap();
    fs::write(bank.join("index.json"), b"{\"format_version\": 1").unwrap();
    let o = bin(&[
        "eval",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(dir.path()),
        "--bank",
        s(&bank),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(data.join("synth_0/test/000.mtns"), b"MTNS\x01").unwrap();
    let o = bin(&[
        "bench",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(dir.path()),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
