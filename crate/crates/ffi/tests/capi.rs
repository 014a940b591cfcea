use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use pidual_ffi::*;

fn last_error() -> String {
    let p = pidual_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

const CONFIG: &str = r#"
seed = 5
[data.synthetic]
n = 300
d = 4
num_classes = 3
annotators = 3
noise_rate = 0.3
[model]
prediction_hidden = [16]
pi_width = 8
[train]
epochs = 2
random_pi_length = 2
"#;

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pidual.h")).unwrap();
    for name in [
        "pidual_last_error_message",
        "pidual_dataset_load_csv",
        "pidual_dataset_from_config",
        "pidual_dataset_shape",
        "pidual_dataset_free",
        "pidual_model_load",
        "pidual_model_num_classes",
        "pidual_model_predict_proba",
        "pidual_model_free",
        "pidual_detect_auc",
        "pidual_roc_auc",
        "pidual_risk_compare",
        "pidual_train_from_config",
        "typedef struct PidualModel PidualModel",
        "PIDUAL_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"pidual.h\"\nint main(void) { PidualModel *m = 0; pidual_model_free(m); return PIDUAL_STATUS_OK; }\n",
    )
    .unwrap();
    let status = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&dir)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler; skipping");
            return;
        }
    };
    assert!(status.success());
}

#[test]
fn null_and_bad_arguments_report_errors() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(pidual_dataset_load_csv(ptr::null(), 3, &mut ds), PidualStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/data.csv").unwrap();
        assert_eq!(pidual_dataset_load_csv(missing.as_ptr(), 3, &mut ds), PidualStatus::Io);
        assert!(ds.is_null());

        let mut auc = 0.0;
        let labels = [1u8, 0];
        assert_eq!(pidual_roc_auc(ptr::null(), labels.as_ptr(), 2, &mut auc), PidualStatus::NullPointer);
        assert!(last_error().contains("scores"));
        pidual_dataset_free(ptr::null_mut());
        pidual_model_free(ptr::null_mut());
    }
}

#[test]
fn roc_auc_counts_ties_as_half() {
    let scores = [0.9, 0.5, 0.5, 0.1];
    let positives = [1u8, 1, 0, 0];
    let mut auc = 0.0;
    let st = unsafe { pidual_roc_auc(scores.as_ptr(), positives.as_ptr(), 4, &mut auc) };
    assert_eq!(st, PidualStatus::Ok);
    assert_eq!(auc, 0.875);

    let none = [0u8; 4];
    let st = unsafe { pidual_roc_auc(scores.as_ptr(), none.as_ptr(), 4, &mut auc) };
    assert_ne!(st, PidualStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn risk_compare_is_exact_with_a_true_mask() {
    let setup = PidualRiskSetup {
        n: 80,
        d: 3,
        m: 3,
        n_noisy: 20,
        pi_scale: 2.0,
        sigma: 1.0,
        flips: 0,
        seed: 9,
    };
    let mut out = PidualRiskComparison::default();
    assert_eq!(unsafe { pidual_risk_compare(&setup, &mut out) }, PidualStatus::Ok);
    assert_eq!(out.routed_bias, 0.0);
    assert!(out.ols_bias > 0.0);
    assert!((out.ols_total - (out.ols_bias + out.ols_variance + out.irreducible)).abs() < 1e-12);

    let bad = PidualRiskSetup { n: 5, ..setup };
    assert_eq!(unsafe { pidual_risk_compare(&bad, &mut out) }, PidualStatus::Setup);
}

#[test]
fn train_load_predict_detect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = tmp.path().join("run");
    let (cfg_c, out_c) = (cstr(&cfg), cstr(&out));
    unsafe {
        assert_eq!(pidual_train_from_config(cfg_c.as_ptr(), out_c.as_ptr(), 1), PidualStatus::Ok);

        let mut model = ptr::null_mut();
        let ck = cstr(&out.join("checkpoint.json"));
        assert_eq!(pidual_model_load(ck.as_ptr(), &mut model), PidualStatus::Ok);
        let mut k = 0;
        assert_eq!(pidual_model_num_classes(model, &mut k), PidualStatus::Ok);
        assert_eq!(k, 3);

        let mut ds = ptr::null_mut();
        assert_eq!(pidual_dataset_from_config(cfg_c.as_ptr(), &mut ds), PidualStatus::Ok);
        let (mut n, mut d, mut p) = (0, 0, 0);
        assert_eq!(pidual_dataset_shape(ds, &mut n, &mut d, &mut p), PidualStatus::Ok);
        assert_eq!((n, d), (300, 4));

        let x = [0.1, -0.3, 0.7, 1.2];
        let mut probs = [0.0; 3];
        assert_eq!(pidual_model_predict_proba(model, x.as_ptr(), 4, probs.as_mut_ptr(), 3), PidualStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(
            pidual_model_predict_proba(model, x.as_ptr(), 3, probs.as_mut_ptr(), 3),
            PidualStatus::Shape
        );
        assert_eq!(
            pidual_model_predict_proba(model, x.as_ptr(), 4, probs.as_mut_ptr(), 2),
            PidualStatus::InvalidArgument
        );

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        for (method, idx) in [(PidualMethod::Confidence, 0), (PidualMethod::Gate, 1)] {
            let mut auc = 0.0;
            assert_eq!(pidual_detect_auc(model, ds, method, &mut auc), PidualStatus::Ok);
            assert_eq!(auc, summary["detection"][idx]["auc"].as_f64().unwrap());
        }

        pidual_dataset_free(ds);
        pidual_model_free(model);
    }
}
