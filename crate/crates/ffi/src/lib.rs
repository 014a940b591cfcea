//! C ABI over the `pidual` library.
//!
//! Every entry point returns a [`PidualStatus`]; results go through out
//! pointers. On failure the message is available from
//! [`pidual_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pidual::commands;
use pidual::config::ExperimentConfig;
use pidual::data::{load_csv, CsvSchema, PiDataset};
use pidual::detection::{self, Method};
use pidual::linear_risk::{compare_risks, corrupt_mask, make_setup, SetupSpec};
use pidual::model::Checkpoint;
use pidual::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PidualStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Shape = 5,
    Contract = 6,
    Numeric = 7,
    Setup = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PidualMethod {
    Confidence = 0,
    Gate = 1,
}

/// Closed-form clean-row risks of OLS and of the routed estimator.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PidualRiskComparison {
    pub ols_bias: f64,
    pub ols_variance: f64,
    pub ols_total: f64,
    pub routed_bias: f64,
    pub routed_variance: f64,
    pub routed_total: f64,
    pub irreducible: f64,
}

/// Parameters of a random linear design.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidualRiskSetup {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub n_noisy: usize,
    pub pi_scale: f64,
    pub sigma: f64,
    /// Mask entries flipped before fitting the routed estimator.
    pub flips: usize,
    pub seed: u64,
}

/// Opaque dataset handle.
pub struct PidualDataset {
    inner: PiDataset,
}

/// Opaque handle to a trained model and the PI layout it expects.
pub struct PidualModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PidualStatus {
    match e {
        Error::Config { .. } => PidualStatus::Config,
        Error::Parse { .. } => PidualStatus::Parse,
        Error::Shape(_) => PidualStatus::Shape,
        Error::Contract(_) => PidualStatus::Contract,
        Error::Numeric(_) => PidualStatus::Numeric,
        Error::Setup(_) => PidualStatus::Setup,
        Error::Io { .. } => PidualStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PidualStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PidualStatus::Ok,
        Ok(Err(Failure::Null(arg))) => {
            set_error(format!("`{arg}` is null"));
            PidualStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            PidualStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PidualStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pidual_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a dataset CSV with `num_classes` label values.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_dataset_load_csv(
    path: *const c_char,
    num_classes: usize,
    out: *mut *mut PidualDataset,
) -> PidualStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = load_csv(&path, CsvSchema::with_classes(num_classes))?;
        *out = Box::into_raw(Box::new(PidualDataset { inner }));
        Ok(())
    })
}

/// Builds the dataset described by an experiment config, split as the
/// trainer would split it.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_dataset_from_config(
    config_path: *const c_char,
    out: *mut *mut PidualDataset,
) -> PidualStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let out = out_arg(out, "out")?;
        let inner = ExperimentConfig::load(&path)?.dataset()?;
        *out = Box::into_raw(Box::new(PidualDataset { inner }));
        Ok(())
    })
}

/// Writes the sample count, feature width and PI width.
///
/// # Safety
/// `ds` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn pidual_dataset_shape(
    ds: *const PidualDataset,
    len: *mut usize,
    feature_dim: *mut usize,
    pi_dim: *mut usize,
) -> PidualStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.inner;
        if let Some(v) = len.as_mut() {
            *v = ds.len();
        }
        if let Some(v) = feature_dim.as_mut() {
            *v = ds.feature_dim();
        }
        if let Some(v) = pi_dim.as_mut() {
            *v = ds.pi_dim();
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pidual_dataset_free(ds: *mut PidualDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_model_load(path: *const c_char, out: *mut *mut PidualModel) -> PidualStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(PidualModel { inner }));
        Ok(())
    })
}

/// Writes the number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_model_num_classes(model: *const PidualModel, out: *mut usize) -> PidualStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        *out_arg(out, "out")? = model.inner.model.spec().num_classes;
        Ok(())
    })
}

/// Class probabilities from the prediction network for one feature row.
///
/// # Safety
/// `features` must hold `feature_len` reals and `probs` `probs_len` reals.
#[no_mangle]
pub unsafe extern "C" fn pidual_model_predict_proba(
    model: *const PidualModel,
    features: *const f64,
    feature_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> PidualStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.inner.model;
        let x = slice_arg(features, feature_len, "features")?;
        let k = model.spec().num_classes;
        if probs_len != k {
            return Err(Failure::Invalid(format!("probs holds {probs_len} values, model has {k} classes")));
        }
        if probs.is_null() {
            return Err(Failure::Null("probs"));
        }
        let p = model.forward_infer(x)?;
        std::slice::from_raw_parts_mut(probs, k).copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pidual_model_free(model: *mut PidualModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Wrong-label detection AUC over the train split of `ds`, which must be
/// the dataset the model was trained on and carry clean labels.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_detect_auc(
    model: *const PidualModel,
    ds: *const PidualDataset,
    method: PidualMethod,
    out: *mut f64,
) -> PidualStatus {
    guard(|| {
        let ck = &ref_arg(model, "model")?.inner;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        let method = match method {
            PidualMethod::Confidence => Method::Confidence,
            PidualMethod::Gate => Method::Gate,
        };
        *out = detection::detect(&ck.model, &ck.prepare(ds), method)?.auc;
        Ok(())
    })
}

/// ROC AUC of `scores` against nonzero entries of `positives`, ties at half.
///
/// # Safety
/// Both arrays must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_roc_auc(
    scores: *const f64,
    positives: *const u8,
    n: usize,
    out: *mut f64,
) -> PidualStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let positives: Vec<bool> = slice_arg(positives, n, "positives")?.iter().map(|&b| b != 0).collect();
        *out_arg(out, "out")? = detection::roc_auc(scores, &positives)?;
        Ok(())
    })
}

/// Builds a random design and compares the two estimators' risks.
///
/// # Safety
/// `setup` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pidual_risk_compare(
    setup: *const PidualRiskSetup,
    out: *mut PidualRiskComparison,
) -> PidualStatus {
    guard(|| {
        let p = ref_arg(setup, "setup")?;
        let out = out_arg(out, "out")?;
        let spec = SetupSpec {
            n: p.n,
            d: p.d,
            m: p.m,
            n2: p.n_noisy,
            pi_scale: p.pi_scale,
            sigma: p.sigma,
            seed: p.seed,
            ..SetupSpec::default()
        };
        let s = make_setup(&spec)?;
        let gamma = corrupt_mask(
            s.gamma_star(),
            p.flips,
            pidual::seed::derive(p.seed, pidual::seed::stream::MASK_CORRUPTION),
        )?;
        let cmp = compare_risks(&s, &gamma)?;
        *out = PidualRiskComparison {
            ols_bias: cmp.ols.bias_term,
            ols_variance: cmp.ols.variance_term,
            ols_total: cmp.ols.total,
            routed_bias: cmp.pidual.bias_term,
            routed_variance: cmp.pidual.variance_term,
            routed_total: cmp.pidual.total,
            irreducible: cmp.ols.irreducible,
        };
        Ok(())
    })
}

/// Runs training from a config and writes the usual artifacts to
/// `out_dir`. `workers` of 0 uses every core.
///
/// # Safety
/// Both paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pidual_train_from_config(
    config_path: *const c_char,
    out_dir: *const c_char,
    workers: usize,
) -> PidualStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        let out = path_arg(out_dir, "out_dir")?;
        commands::train(&cfg, &out, (workers > 0).then_some(workers))?;
        Ok(())
    })
}
