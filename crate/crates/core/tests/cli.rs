use std::fs;
use std::path::Path;
use std::process::Command;

use krilc::config::{ExperimentConfig, Preset};
use krilc::persist::{read_record, RECORD_FILE, TRACE_FILE};

fn krilc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_krilc")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn small_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::preset(Preset::Sec51);
    cfg.n_e = 3;
    cfg.n_d = 12;
    cfg.n_a = 2;
    cfg.n_b = 2;
    cfg.n_c = 2;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_then_fit_reproduces_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let (code, stdout) = krilc(&["run", "--config", &cfg, "--seed", "4", "--out", out_s]);
    assert_eq!(code, 0);
    assert!(stdout.contains("final tracking fit"));
    let record = read_record(&out).unwrap();
    assert_eq!(record.seed, 4);
    assert_eq!(record.tracking_fits.len(), 4);

    let (code, stdout) = krilc(&["fit", "--run", out_s]);
    assert_eq!(code, 0, "{stdout}");

    // a tampered trace no longer reproduces the stored fits
    let trace = fs::read_to_string(out.join(TRACE_FILE)).unwrap();
    let record_text = fs::read_to_string(out.join(RECORD_FILE)).unwrap();
    let mut rec = read_record(&out).unwrap();
    rec.tracking_fits[2] = rec.tracking_fits[2].map(|f| f + 1.0);
    fs::write(out.join(RECORD_FILE), serde_json::to_string(&rec).unwrap()).unwrap();
    assert_eq!(krilc(&["fit", "--run", out_s]).0, 2);
    fs::write(out.join(RECORD_FILE), record_text).unwrap();
    assert_eq!(fs::read_to_string(out.join(TRACE_FILE)).unwrap(), trace);
}

#[test]
fn reruns_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for m in ["KRILC", "KRILC-LS", "ILC", "IILC"] {
        let a = dir.path().join(format!("a-{m}"));
        let b = dir.path().join(format!("b-{m}"));
        for d in [&a, &b] {
            let (code, _) = krilc(&["run", "--config", &cfg, "--method", m, "--out", d.to_str().unwrap()]);
            assert_eq!(code, 0);
        }
        assert_eq!(
            fs::read_to_string(a.join(TRACE_FILE)).unwrap(),
            fs::read_to_string(b.join(TRACE_FILE)).unwrap()
        );
    }
}

#[test]
fn campaign_writes_summary_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("camp");
    let (code, stdout) = krilc(&[
        "campaign",
        "--config",
        &cfg,
        "--count",
        "2",
        "--methods",
        "KRILC,ILC",
        "--parallel",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("KRILC: 2 runs"));
    assert!(out.join("summary.json").exists());
    let fits = fs::read_to_string(out.join("fits.csv")).unwrap();
    assert_eq!(fits.lines().count(), 1 + 2 * 4);
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 4);
}

#[test]
fn bound_and_gen_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout) = krilc(&["bound", "--preset", "sec51"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("condition_holds"));

    let out = dir.path().join("plants");
    let (code, _) = krilc(&["gen", "--preset", "sec52-control", "--count", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let plant = fs::read_to_string(out.join("plant-0.txt")).unwrap();
    let model = krilc::plant::LtvArxModel::from_text(&plant).unwrap();
    assert_eq!(model.horizon, 200);

    let (code, _) = krilc(&["bound", "--preset", "sec52-control", "--plant", out.join("plant-1.txt").to_str().unwrap()]);
    assert_eq!(code, 0);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "study = \"control\"\n").unwrap();
    assert_eq!(krilc(&["run", "--config", bad.to_str().unwrap(), "--out", "x"]).0, 1);
    assert_eq!(krilc(&["run", "--preset", "sec51", "--method", "nope", "--out", "x"]).0, 1);
    assert_eq!(krilc(&["frobnicate"]).0, 1);
}
