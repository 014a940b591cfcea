use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pidual::commands::{
    self, read_ablation_csv, read_json, AblationSummary, DatasetMeta, RunSummary, Timing, ABLATION_FILE,
    CHECKPOINT_FILE, DATASET_FILE, DATASET_META_FILE, RISK_FILE, SUMMARY_FILE, TIMING_FILE,
};
use pidual::data::{load_csv, save_csv, CsvSchema};
use pidual::detection::{DetectionReport, Method};
use pidual::linear_risk::read_risk_csv;
use pidual::model::{Checkpoint, Variant};
use pidual::training::TrainRecord;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn pidual(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pidual"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pidual(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_config(dir: &Path, base: &str, extra: &str) -> PathBuf {
    let text = std::fs::read_to_string(fixture(base)).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{text}\n{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let missing = pidual(&["gen", "--config", s(&tmp.path().join("nope.toml")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(4));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = \"ten\"\n").unwrap();
    assert_eq!(pidual(&["train", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));

    std::fs::write(&bad, "[data.synthetic]\nseed = 3\n").unwrap();
    let seeded = pidual(&["gen", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(seeded.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&seeded.stderr).contains("top-level `seed`"));

    let cfg = with_config(tmp.path(), "minimal.toml", "");
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("epochs = 1", "epochs = 2\nbase_lr = 1e12"))
        .unwrap();
    let diverged = pidual(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(diverged.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverged.stderr));
}

#[test]
fn gen_writes_dataset_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    ok(&["gen", "--config", s(&fixture("minimal.toml")), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join(DATASET_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 301);
    let meta: DatasetMeta = read_json(&out.join(DATASET_META_FILE)).unwrap();
    assert_eq!(meta.n, 300);
    let ds = load_csv(&out.join(DATASET_FILE), CsvSchema::with_classes(3)).unwrap();
    assert_eq!(ds.realized_noise_rate(), meta.realized_noise_rate);

    let clean_dir = tempfile::tempdir().unwrap();
    let cfg = with_config(clean_dir.path(), "minimal.toml", "");
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("noise_rate = 0.3", "noise_rate = 0.0"))
        .unwrap();
    let out = clean_dir.path().join("gen");
    ok(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    let meta: DatasetMeta = read_json(&out.join(DATASET_META_FILE)).unwrap();
    assert_eq!(meta.realized_noise_rate, Some(0.0));
}

#[test]
fn train_detect_and_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("minimal.toml");
    let gen = tmp.path().join("gen");
    let train = tmp.path().join("train");
    ok(&["gen", "--config", s(&cfg), "--out", s(&gen)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&train), "--workers", "1"]);

    let summary: RunSummary = read_json(&train.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.trials.len(), 1);
    assert!(!summary.partial);
    let record = TrainRecord::read_csv(&train.join(summary.trials[0].record_file.as_ref().unwrap())).unwrap();
    assert_eq!(record.len(), 1);
    let timing: Timing = read_json(&train.join(TIMING_FILE)).unwrap();
    assert!(timing.wall_clock_seconds >= 0.0);
    let ck = Checkpoint::load(&train.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.model.spec().num_classes, 3);
    assert!(train.join("dynamics.svg").exists());
    let methods: Vec<Method> = summary.detection.iter().map(|d| d.method).collect();
    assert_eq!(methods, [Method::Confidence, Method::Gate]);

    let det = tmp.path().join("detect");
    ok(&[
        "detect",
        "--checkpoint",
        s(&train.join(CHECKPOINT_FILE)),
        "--data",
        s(&gen.join(DATASET_FILE)),
        "--method",
        "confidence",
        "--method",
        "gate",
        "--out",
        s(&det),
    ]);
    for (method, from_train) in [Method::Confidence, Method::Gate].into_iter().zip(&summary.detection) {
        let report = DetectionReport::load(&det.join(commands::report_file(method))).unwrap();
        assert!((0.0..=1.0).contains(&report.auc));
        assert_eq!(report.auc, from_train.auc);
        assert!(det.join(commands::histogram_file(method)).exists());
    }

    let unlabeled = tmp.path().join("unlabeled.csv");
    let ds = load_csv(&gen.join(DATASET_FILE), CsvSchema::with_classes(3)).unwrap();
    save_csv(&ds.without_clean_labels(), &unlabeled).unwrap();
    let missing = pidual(&[
        "detect",
        "--checkpoint",
        s(&train.join(CHECKPOINT_FILE)),
        "--data",
        s(&unlabeled),
        "--out",
        s(&det),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no clean_label column"));
}

#[test]
fn grid_writes_one_record_per_trial() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with_config(tmp.path(), "minimal.toml", "[grid]\nlr = [0.01, 0.1]\nweight_decay = [0.0, 1e-4]\n");
    let out = tmp.path().join("train");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--workers", "2"]);
    let summary: RunSummary = read_json(&out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.trials.len(), 4);
    for idx in 0..4 {
        assert!(out.join(commands::record_file(idx)).exists());
    }
    let keys: Vec<f64> = summary.trials.iter().map(|t| t.best_noisy_val_acc.unwrap()).collect();
    assert!(keys.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(summary.selected_trial, Some(summary.trials[0].point.index));
}

#[test]
fn risk_rows_match_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("risk");
    ok(&["risk", "--config", s(&fixture("minimal.toml")), "--out", s(&out)]);
    let rows = read_risk_csv(&out.join(RISK_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].mc_ols.is_none() && rows[0].mc_pidual.is_none());
    assert_eq!(rows[0].pidual_bias, 0.0);

    let cfg = with_config(tmp.path(), "minimal.toml", "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "n2 = 15",
        "n2 = 15\nsetups = 2\nflips = [0, 3]\nsigmas = [0.5, 2.0]\nresamples = 20000",
    );
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("risk_mc");
    ok(&["risk", "--config", s(&cfg), "--out", s(&out)]);
    let rows = read_risk_csv(&out.join(RISK_FILE)).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        if r.flips == 0 {
            assert_eq!(r.pidual_bias, 0.0);
        }
        for (mc, se, exact) in [
            (r.mc_ols, r.mc_ols_se, r.ols_total),
            (r.mc_pidual, r.mc_pidual_se, r.pidual_total),
        ] {
            let (mc, se) = (mc.unwrap(), se.unwrap());
            assert!((mc - exact).abs() <= 4.0 * se, "{r:?}");
        }
    }
    assert!(out.join("risk.svg").exists());
}

#[test]
fn ablate_smoke_ranks_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--config", s(&fixture("minimal.toml")), "--out", s(&out), "--workers", "2"]);
    let rows = read_ablation_csv(&out.join(ABLATION_FILE)).unwrap();
    assert_eq!(rows.len(), Variant::ALL.len());
    assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    let summary: AblationSummary = read_json(&out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.rows, rows);
}

#[test]
fn uninformative_pi_matches_random_pi() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("uninformative_pi.toml");
    let mut ce = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        ok(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
        let rows = read_ablation_csv(&out.join(ABLATION_FILE)).unwrap();
        let acc = |v: Variant| rows.iter().find(|r| r.variant == v).unwrap().clean_test_acc.unwrap();
        let (full, random) = (acc(Variant::PiDual), acc(Variant::OnlyRandomPi));
        assert!((full - random).abs() <= 0.02, "full {full}, random {random}");
        ce.push(rows.into_iter().find(|r| r.variant == Variant::CrossEntropy).unwrap());
    }
    assert_eq!(ce[0], ce[1]);
}
