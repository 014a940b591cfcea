//! Subcommand runners behind the `pidual` binary. Each writes its
//! artifacts into one output directory; everything except `timing.json`
//! is a deterministic function of the config and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, RunSeeds};
use crate::data::{load_csv, save_csv, CsvSchema, PiDataset};
use crate::detection::{self, DetectionReport, Method};
use crate::error::{Error, Result};
use crate::linear_risk::{
    compare_risks, corrupt_mask, make_setup, monte_carlo_risk, write_risk_csv, Estimator, RiskRow,
};
use crate::model::{Checkpoint, PiDualModel, Variant, CHECKPOINT_FORMAT};
use crate::seed;
use crate::svg::{self, Series};
use crate::training::{run_grid, EpochMetrics, GridPoint, GridSpec, TrainRecord, TrialOutput, TrialResult};

pub const DATASET_FILE: &str = "data.csv";
pub const DATASET_META_FILE: &str = "data.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RISK_FILE: &str = "risk.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        row: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

fn write_timing(out: &Path, start: Instant) -> Result<()> {
    write_json(
        &out.join(TIMING_FILE),
        &Timing {
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

/// Sidecar of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub seeds: RunSeeds,
    pub n: usize,
    pub feature_dim: usize,
    pub pi_dim: usize,
    pub num_classes: usize,
    /// Over all samples.
    pub realized_noise_rate: Option<f64>,
    pub train_noise_rate: Option<f64>,
}

pub fn gen(cfg: &LoadedConfig, out: &Path) -> Result<DatasetMeta> {
    if cfg.config.synthetic().is_none() {
        return Err(Error::config("data", "gen needs a synthetic data source"));
    }
    ensure_dir(out)?;
    let ds = cfg.dataset()?;
    let train = ds.indices(crate::data::Split::Train);
    let train_noise_rate = (!train.is_empty() && ds.has_clean_labels()).then(|| {
        train.iter().filter(|&&i| ds.is_wrong(i) == Some(true)).count() as f64 / train.len() as f64
    });
    let meta = DatasetMeta {
        config_hash: cfg.config.hash(),
        seeds: cfg.config.seeds(),
        n: ds.len(),
        feature_dim: ds.feature_dim(),
        pi_dim: ds.pi_dim(),
        num_classes: ds.num_classes(),
        realized_noise_rate: ds.realized_noise_rate(),
        train_noise_rate,
    };
    save_csv(&ds, &out.join(DATASET_FILE))?;
    write_json(&out.join(DATASET_META_FILE), &meta)?;
    Ok(meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub point: GridPoint,
    pub ok: bool,
    pub error: Option<String>,
    pub record_file: Option<String>,
    pub best_epoch: Option<usize>,
    pub best_noisy_val_acc: Option<f64>,
    pub best_clean_test_acc: Option<f64>,
    pub final_clean_test_acc: Option<f64>,
}

impl TrialSummary {
    fn new(result: &TrialResult, record_file: Option<String>) -> Self {
        match &result.output {
            Ok(out) => {
                let o = &out.outcome;
                let best = &o.record.epochs[o.best_epoch];
                TrialSummary {
                    point: result.point.clone(),
                    ok: true,
                    error: None,
                    record_file,
                    best_epoch: Some(o.best_epoch),
                    best_noisy_val_acc: best.noisy_val_acc,
                    best_clean_test_acc: best.clean_test_acc,
                    final_clean_test_acc: o.record.last().and_then(|m| m.clean_test_acc),
                }
            }
            Err(e) => TrialSummary {
                point: result.point.clone(),
                ok: false,
                error: Some(e.to_string()),
                record_file: None,
                best_epoch: None,
                best_noisy_val_acc: None,
                best_clean_test_acc: None,
                final_clean_test_acc: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionAuc {
    pub method: Method,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seeds: RunSeeds,
    pub early_stopping: bool,
    /// Ranked: best noisy-validation accuracy first, failures last.
    pub trials: Vec<TrialSummary>,
    /// Grid index of the winning trial.
    pub selected_trial: Option<usize>,
    pub selected_epoch: Option<usize>,
    pub detection: Vec<DetectionAuc>,
    /// Some trial failed; its artifacts are missing.
    pub partial: bool,
}

fn default_methods(model: &PiDualModel, requested: &[Method]) -> Vec<Method> {
    if !requested.is_empty() {
        return requested.to_vec();
    }
    let mut methods = vec![Method::Confidence];
    if model.flags().use_gate {
        methods.push(Method::Gate);
    }
    methods
}

fn checkpoint_of(out: &TrialOutput, early_stopping: bool) -> Checkpoint {
    Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        variant: Some(out.variant),
        random_pi: out.random_pi,
        only_random_pi: out.variant.only_random_pi(),
        epoch: out.outcome.selected_epoch(early_stopping),
        model: out.outcome.selected(early_stopping).clone(),
    }
}

fn dynamics_chart(title: &str, record: &TrainRecord) -> String {
    type Pick = fn(&EpochMetrics) -> Option<f64>;
    let curves: [(&str, Pick); 7] = [
        ("combined, clean", |m| m.train_acc_clean),
        ("combined, wrong", |m| m.train_acc_wrong),
        ("prediction, clean", |m| m.pred_acc_clean),
        ("prediction, wrong", |m| m.pred_acc_wrong),
        ("noise, clean", |m| m.noise_acc_clean),
        ("noise, wrong", |m| m.noise_acc_wrong),
        ("clean test", |m| m.clean_test_acc),
    ];
    let series: Vec<Series> = curves
        .iter()
        .filter_map(|(label, pick)| {
            let pts: Vec<(f64, f64)> = record
                .epochs
                .iter()
                .filter_map(|m| pick(m).map(|v| (m.epoch as f64, v)))
                .collect();
            (!pts.is_empty()).then(|| Series::line(*label, pts))
        })
        .collect();
    svg::line_chart(title, "epoch", "accuracy on noisy labels", &series, Some((0.0, 1.0)))
}

fn report_chart(report: &DetectionReport) -> String {
    let (title, x) = match report.method {
        Method::Confidence => ("Confidence on the noisy label", "softmax confidence"),
        Method::Gate => ("Gate value", "gate"),
    };
    svg::histogram_chart(
        &format!("{title} (AUC {:.3})", report.auc),
        x,
        &report.bin_edges,
        &report.clean_counts,
        &report.wrong_counts,
    )
}

pub fn histogram_file(method: Method) -> String {
    format!("{}_histogram.svg", method.name())
}

pub fn report_file(method: Method) -> String {
    format!("detection_{}.json", method.name())
}

pub fn record_file(index: usize) -> String {
    format!("trial_{index:03}.csv")
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs the configured grid (a single point without a `grid` section).
/// Artifacts are written before a trial failure is reported as an error.
pub fn train(cfg: &LoadedConfig, out: &Path, workers: Option<usize>) -> Result<RunSummary> {
    let start = Instant::now();
    let config = &cfg.config;
    let ds = cfg.dataset()?;
    ensure_dir(out)?;
    let base = config.train_config();
    let grid = config.grid_spec();
    let results = run_grid(&grid, &ds, &config.model.architecture(), &base, workers.unwrap_or_else(default_workers))?;

    let mut trials = Vec::with_capacity(results.len());
    for r in &results {
        let file = match &r.output {
            Ok(o) => {
                let name = record_file(r.point.index);
                o.outcome.record.write_csv(&out.join(&name))?;
                Some(name)
            }
            Err(_) => None,
        };
        trials.push(TrialSummary::new(r, file));
    }

    let mut summary = RunSummary {
        config_hash: config.hash(),
        seeds: config.seeds(),
        early_stopping: base.early_stopping,
        trials,
        selected_trial: None,
        selected_epoch: None,
        detection: Vec::new(),
        partial: results.iter().any(|r| r.output.is_err()),
    };

    if let Some((point, best)) = results.iter().find_map(|r| r.output.as_ref().ok().map(|o| (&r.point, o))) {
        let ck = checkpoint_of(best, base.early_stopping);
        ck.save(&out.join(CHECKPOINT_FILE))?;
        summary.selected_trial = Some(point.index);
        summary.selected_epoch = Some(ck.epoch);
        let plots = config.output.plots;
        if plots {
            let title = format!("Training dynamics, {} (trial {})", point.variant.name(), point.index);
            svg::write(&out.join("dynamics.svg"), &dynamics_chart(&title, &best.outcome.record))?;
        }
        if ds.has_clean_labels() {
            let prepared = ck.prepare(&ds);
            for method in default_methods(&ck.model, &config.detection.methods) {
                let report = detection::detect(&ck.model, &prepared, method)?;
                if plots {
                    svg::write(&out.join(histogram_file(method)), &report_chart(&report))?;
                }
                summary.detection.push(DetectionAuc {
                    method,
                    auc: report.auc,
                });
            }
        }
    }

    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_timing(out, start)?;
    if let Some(err) = results.into_iter().find_map(|r| r.output.err()) {
        return Err(err);
    }
    Ok(summary)
}

/// Scores the train split of `data` with a saved model. The dataset must
/// be the one the model was trained on (row order matters for random PI).
pub fn detect(
    checkpoint: &Path,
    data: &Path,
    methods: &[Method],
    out: &Path,
    plots: bool,
) -> Result<Vec<DetectionReport>> {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = ck.model.spec();
    let ds = load_csv(data, CsvSchema::with_classes(spec.num_classes))?;
    detection::wrong_flags(&ds)?;
    let prepared = ck.prepare(&ds);
    ensure_dir(out)?;
    let mut reports = Vec::new();
    for method in default_methods(&ck.model, methods) {
        let report = detection::detect(&ck.model, &prepared, method)?;
        report.save(&out.join(report_file(method)))?;
        if plots {
            svg::write(&out.join(histogram_file(method)), &report_chart(&report))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Sweeps designs x noisy-row counts x noise levels x mask corruptions.
pub fn risk(cfg: &LoadedConfig, out: &Path) -> Result<Vec<RiskRow>> {
    let config = &cfg.config;
    let r = &config.risk;
    let root = config.seeds().risk;
    let mut rows = Vec::new();
    for setup_id in 0..r.setups {
        let setup_seed = seed::derive(root, setup_id as u64);
        for n2 in r.n2_sweep() {
            let base = make_setup(&r.setup_spec(n2, r.sigmas[0], setup_seed))?;
            for &sigma in &r.sigmas {
                let setup = base.with_sigma(sigma)?;
                for &flips in &r.flips {
                    let gamma = corrupt_mask(
                        setup.gamma_star(),
                        flips,
                        seed::derive(setup_seed, seed::stream::MASK_CORRUPTION),
                    )?;
                    let cmp = compare_risks(&setup, &gamma)?;
                    let mc = if r.resamples > 0 {
                        let mc_seed = seed::derive(setup_seed, rows.len() as u64);
                        let ols = monte_carlo_risk(&setup, &Estimator::Ols, r.resamples, mc_seed)?;
                        let pd = monte_carlo_risk(&setup, &Estimator::PiDual(gamma.clone()), r.resamples, mc_seed)?;
                        Some((ols, pd))
                    } else {
                        None
                    };
                    rows.push(RiskRow::new(setup_id, &setup, flips, &cmp, mc));
                }
            }
        }
    }
    ensure_dir(out)?;
    write_risk_csv(&rows, &out.join(RISK_FILE))?;
    if config.output.plots {
        svg::write(&out.join("risk.svg"), &risk_chart(&rows))?;
    }
    Ok(rows)
}

fn risk_chart(rows: &[RiskRow]) -> String {
    let idx = |f: fn(&RiskRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter()
            .enumerate()
            .filter_map(|(i, r)| f(r).map(|v| (i as f64, v)))
            .collect()
    };
    let mut series = vec![
        Series::line("OLS closed form", idx(|r| Some(r.ols_total))),
        Series::line("routed closed form", idx(|r| Some(r.pidual_total))),
    ];
    if rows.iter().any(|r| r.mc_ols.is_some()) {
        series.push(Series::markers("OLS simulated", idx(|r| r.mc_ols)));
        series.push(Series::markers("routed simulated", idx(|r| r.mc_pidual)));
    }
    svg::line_chart("Clean-row risk", "sweep row", "risk", &series, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rank: usize,
    pub variant: Variant,
    pub ok: bool,
    pub best_epoch: Option<usize>,
    pub noisy_val_acc: Option<f64>,
    /// At the early-stopping epoch.
    pub clean_test_acc: Option<f64>,
    pub final_clean_test_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config_hash: String,
    pub seeds: RunSeeds,
    pub rows: Vec<AblationRow>,
}

/// Trains every configured variant with the same trial seed and ranks them
/// by early-stopped clean-test accuracy (failures last, ties in config
/// order). Returns the trial outputs alongside the table.
pub fn run_ablation(cfg: &LoadedConfig, workers: Option<usize>) -> Result<(Vec<AblationRow>, Vec<TrialResult>)> {
    let config = &cfg.config;
    let ds: PiDataset = cfg.dataset()?;
    let base = config.train_config();
    let grid = GridSpec {
        lr: vec![base.base_lr],
        weight_decay: vec![base.weight_decay],
        random_pi_length: vec![base.random_pi_length],
        variant: config.ablate.variants.clone(),
        shared_seed: true,
    };
    let mut results = run_grid(&grid, &ds, &config.model.architecture(), &base, workers.unwrap_or_else(default_workers))?;
    results.sort_by_key(|r| r.point.index);
    let mut rows: Vec<(usize, AblationRow)> = results
        .iter()
        .map(|r| {
            let t = TrialSummary::new(r, None);
            (
                r.point.index,
                AblationRow {
                    rank: 0,
                    variant: r.point.variant,
                    ok: t.ok,
                    best_epoch: t.best_epoch,
                    noisy_val_acc: t.best_noisy_val_acc,
                    clean_test_acc: t.best_clean_test_acc,
                    final_clean_test_acc: t.final_clean_test_acc,
                    error: t.error,
                },
            )
        })
        .collect();
    rows.sort_by(|(ia, a), (ib, b)| {
        let key = |r: &AblationRow| r.clean_test_acc.unwrap_or(f64::NEG_INFINITY);
        (!a.ok)
            .cmp(&!b.ok)
            .then_with(|| key(b).total_cmp(&key(a)))
            .then(ia.cmp(ib))
    });
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(k, (_, row))| AblationRow { rank: k + 1, ..row })
        .collect();
    Ok((rows, results))
}

pub fn ablate(cfg: &LoadedConfig, out: &Path, workers: Option<usize>) -> Result<AblationSummary> {
    let start = Instant::now();
    let (rows, _) = run_ablation(cfg, workers)?;
    ensure_dir(out)?;
    write_ablation_csv(&rows, &out.join(ABLATION_FILE))?;
    let summary = AblationSummary {
        config_hash: cfg.config.hash(),
        seeds: cfg.config.seeds(),
        rows,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_timing(out, start)?;
    if let Some(row) = summary.rows.iter().find(|r| !r.ok) {
        return Err(Error::Numeric(format!(
            "variant {} failed: {}",
            row.variant.name(),
            row.error.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(summary)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Output directory: the flag when given, else the config's.
pub fn output_dir(cfg: &LoadedConfig, flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => cfg.resolve(&cfg.config.output.dir),
    }
}
