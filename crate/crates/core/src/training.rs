//! Minibatch training, per-epoch metrics, early stopping and grid search.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_random_pi, PiDataset, RandomPiSpec, Split, TrainingView};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, ModelGradients, ModelOptimizer, ModelSpec, PiDualModel, Variant};
use crate::nn::{argmax, OptimizerConfig};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub exempt_pi_nets_from_wd: bool,
    pub random_pi_length: usize,
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            base_lr: 0.05,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            exempt_pi_nets_from_wd: false,
            random_pi_length: 0,
            early_stopping: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        self.optimizer().validate()
    }
}

/// Metrics captured after one epoch. `None` marks a metric that cannot be
/// computed (missing split, missing clean labels, ablated head, empty subset).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Combined logits on the noisy label, train samples whose label is clean.
    pub train_acc_clean: Option<f64>,
    pub train_acc_wrong: Option<f64>,
    /// Prediction network alone on the noisy label.
    pub pred_acc_clean: Option<f64>,
    pub pred_acc_wrong: Option<f64>,
    /// Noise network alone on the noisy label.
    pub noise_acc_clean: Option<f64>,
    pub noise_acc_wrong: Option<f64>,
    pub noisy_val_acc: Option<f64>,
    pub clean_test_acc: Option<f64>,
    pub mean_gate_clean: Option<f64>,
    pub mean_gate_wrong: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainRecord {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Earliest epoch with the highest noisy-validation accuracy.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, m) in self.epochs.iter().enumerate() {
            if let Some(acc) = m.noisy_val_acc {
                if best.is_none_or(|(_, b)| acc > b) {
                    best = Some((i, acc));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        for row in &self.epochs {
            w.serialize(row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let epochs = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| Error::Parse {
                    row: i + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainRecord { epochs })
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Noisy,
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Combined,
    Prediction,
    Noise,
}

/// Fraction of samples in `split` whose argmax under `head` equals the
/// chosen label.
pub fn evaluate(
    model: &PiDualModel,
    ds: &PiDataset,
    split: Split,
    on_labels: LabelSource,
    head: Head,
) -> Result<f64> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("split `{split}` is empty")));
    }
    if on_labels == LabelSource::Clean && !ds.has_clean_labels() {
        return Err(Error::Contract("clean labels are not available".into()));
    }
    if head == Head::Noise && !model.flags().use_noise_net {
        return Err(Error::Contract("model has no noise network".into()));
    }
    let mut hits = 0usize;
    for &i in &idx {
        let label = match on_labels {
            LabelSource::Noisy => ds.noisy_label(i),
            LabelSource::Clean => ds.clean_label(i).expect("checked above"),
        };
        let logits = head_logits(model, ds, i, head)?;
        if argmax(&logits) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

fn head_logits(model: &PiDualModel, ds: &PiDataset, i: usize, head: Head) -> Result<Vec<f64>> {
    match head {
        Head::Prediction => model.prediction_logits(ds.features(i)),
        Head::Combined => Ok(model.forward_train(ds.features(i), ds.pi(i))?.combined),
        Head::Noise => model
            .noise_logits(ds.features(i), ds.pi(i))?
            .ok_or_else(|| Error::Contract("model has no noise network".into())),
    }
}

#[derive(Default)]
struct Tally {
    hits: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.hits += hit as usize;
        self.n += 1;
    }

    fn rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.hits as f64 / self.n as f64)
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Metrics for one epoch. Reads clean labels of the train split for the
/// clean/wrong breakdown; nothing here feeds back into the parameters.
pub fn epoch_metrics(model: &PiDualModel, ds: &PiDataset, epoch: usize) -> Result<EpochMetrics> {
    let mut combined = [Tally::default(), Tally::default()];
    let mut pred = [Tally::default(), Tally::default()];
    let mut noise = [Tally::default(), Tally::default()];
    let mut gate = [Mean::default(), Mean::default()];
    let mut val = Tally::default();
    let mut test = Tally::default();

    for i in 0..ds.len() {
        match ds.split(i) {
            Split::Train => {
                let Some(wrong) = ds.is_wrong(i) else { continue };
                let w = wrong as usize;
                let y = ds.noisy_label(i);
                let fwd = model.forward_train(ds.features(i), ds.pi(i))?;
                combined[w].add(argmax(&fwd.combined) == y);
                pred[w].add(argmax(fwd.tape.prediction_logits()) == y);
                if let Some(e) = fwd.tape.noise_logits() {
                    noise[w].add(argmax(e) == y);
                }
                if let Some(g) = fwd.gate {
                    gate[w].sum += g;
                    gate[w].n += 1;
                }
            }
            Split::NoisyVal => {
                let logits = model.prediction_logits(ds.features(i))?;
                val.add(argmax(&logits) == ds.noisy_label(i));
            }
            Split::CleanTest => {
                let Some(y) = ds.clean_label(i) else { continue };
                let logits = model.prediction_logits(ds.features(i))?;
                test.add(argmax(&logits) == y);
            }
        }
    }

    Ok(EpochMetrics {
        epoch,
        train_acc_clean: combined[0].rate(),
        train_acc_wrong: combined[1].rate(),
        pred_acc_clean: pred[0].rate(),
        pred_acc_wrong: pred[1].rate(),
        noise_acc_clean: noise[0].rate(),
        noise_acc_wrong: noise[1].rate(),
        noisy_val_acc: val.rate(),
        clean_test_acc: test.rate(),
        mean_gate_clean: gate[0].rate(),
        mean_gate_wrong: gate[1].rate(),
    })
}

/// One pass over the training view in a fresh random order. Returns the
/// mean training loss.
pub fn fit_epoch<R: Rng + ?Sized>(
    model: &mut PiDualModel,
    optimizer: &mut ModelOptimizer,
    view: &TrainingView<'_>,
    epoch: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..view.len()).collect();
    order.shuffle(rng);
    let mut grads = ModelGradients::zeros_like(model);
    let mut total = 0.0;
    for (b, batch) in order.chunks(batch_size).enumerate() {
        grads.fill_zero();
        for &k in batch {
            let s = view.sample(k);
            let fwd = model.forward_train(s.features, s.pi)?;
            let loss = model.backward_train_into(&fwd.tape, s.label, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            total += loss;
        }
        grads.scale(1.0 / batch.len() as f64);
        optimizer
            .step(model, &grads, epoch)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
    }
    Ok(total / view.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the earliest epoch with the best noisy-validation
    /// accuracy; the final parameters when there is no validation split.
    pub best: PiDualModel,
    pub best_epoch: usize,
    pub final_model: PiDualModel,
    pub record: TrainRecord,
    pub train_loss: Vec<f64>,
}

impl TrainOutcome {
    /// The model a run reports: `best` under early stopping, else final.
    pub fn selected(&self, early_stopping: bool) -> &PiDualModel {
        if early_stopping {
            &self.best
        } else {
            &self.final_model
        }
    }

    pub fn selected_epoch(&self, early_stopping: bool) -> usize {
        if early_stopping {
            self.best_epoch
        } else {
            self.record.len() - 1
        }
    }
}

pub fn train(model: PiDualModel, ds: &PiDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = model.spec();
    if spec.x_dim != ds.feature_dim() || spec.pi_dim != ds.pi_dim() || spec.num_classes != ds.num_classes() {
        return Err(Error::Shape(format!(
            "model expects x={}, pi={}, K={} but dataset has x={}, pi={}, K={}",
            spec.x_dim,
            spec.pi_dim,
            spec.num_classes,
            ds.feature_dim(),
            ds.pi_dim(),
            ds.num_classes()
        )));
    }
    let view = ds.training_view();
    if view.is_empty() {
        return Err(Error::Contract("dataset has no train split".into()));
    }

    let mut model = model;
    let mut optimizer = ModelOptimizer::new(&model, cfg.optimizer(), cfg.exempt_pi_nets_from_wd)?;
    let mut rng = seed::rng(seed::derive(cfg.seed, stream::SHUFFLE));
    let mut record = TrainRecord::default();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, PiDualModel)> = None;

    for epoch in 0..cfg.epochs {
        train_loss.push(fit_epoch(&mut model, &mut optimizer, &view, epoch, cfg.batch_size, &mut rng)?);
        let metrics = epoch_metrics(&model, ds, epoch)?;
        if let Some(acc) = metrics.noisy_val_acc {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, model.clone()));
            }
        }
        record.epochs.push(metrics);
    }

    let (best_epoch, best) = match best {
        Some((e, _, m)) => (e, m),
        None => (cfg.epochs - 1, model.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        final_model: model,
        record,
        train_loss,
    })
}

/// Network sizes shared by every trial of a run; the variant supplies the
/// ablation flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub prediction_hidden: Vec<usize>,
    pub pi_width: usize,
    pub shared_first_layer: bool,
    /// Overrides the variant's flags when set.
    pub ablation: Option<AblationFlags>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            prediction_hidden: vec![64, 64],
            pi_width: 64,
            shared_first_layer: true,
            ablation: None,
        }
    }
}

impl Architecture {
    pub fn spec_for(&self, ds: &PiDataset, variant: Variant) -> ModelSpec {
        ModelSpec {
            x_dim: ds.feature_dim(),
            pi_dim: ds.pi_dim(),
            num_classes: ds.num_classes(),
            prediction_hidden: self.prediction_hidden.clone(),
            pi_width: self.pi_width,
            shared_first_layer: self.shared_first_layer,
            ablation: self.ablation.unwrap_or_else(|| variant.flags()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub variant: Variant,
    pub random_pi: RandomPiSpec,
    pub outcome: TrainOutcome,
}

/// Random PI columns depend only on the trial seed.
pub fn random_pi_spec(cfg: &TrainConfig) -> RandomPiSpec {
    RandomPiSpec {
        length: cfg.random_pi_length,
        seed: seed::derive(cfg.seed, stream::RANDOM_PI),
    }
}

/// Prepares the PI layout for `variant` (random columns appended, or random
/// columns alone), builds the model from the trial seed and trains it.
pub fn run_trial(ds: &PiDataset, arch: &Architecture, variant: Variant, cfg: &TrainConfig) -> Result<TrialOutput> {
    cfg.validate()?;
    if variant.only_random_pi() && cfg.random_pi_length == 0 {
        return Err(Error::config(
            "train.random_pi_length",
            "the only_random_pi variant needs random_pi_length >= 1",
        ));
    }
    let random_pi = random_pi_spec(cfg);
    let mut prepared = augment_random_pi(ds, random_pi);
    if variant.only_random_pi() {
        prepared = prepared.only_random_pi();
    }
    let model = PiDualModel::new(arch.spec_for(&prepared, variant), seed::derive(cfg.seed, stream::MODEL))?;
    let outcome = train(model, &prepared, cfg)?;
    Ok(TrialOutput {
        variant,
        random_pi,
        outcome,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub random_pi_length: Vec<usize>,
    pub variant: Vec<Variant>,
    /// Every trial uses the base seed instead of a per-point derived seed.
    pub shared_seed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub random_pi_length: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl GridSpec {
    /// A single point at the base configuration.
    pub fn single(base: &TrainConfig, variant: Variant) -> Self {
        GridSpec {
            lr: vec![base.base_lr],
            weight_decay: vec![base.weight_decay],
            random_pi_length: vec![base.random_pi_length],
            variant: vec![variant],
            shared_seed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("grid.lr", self.lr.len()),
            ("grid.weight_decay", self.weight_decay.len()),
            ("grid.random_pi_length", self.random_pi_length.len()),
            ("grid.variant", self.variant.len()),
        ];
        for (field, len) in axes {
            if len == 0 {
                return Err(Error::config(field, "axis must have at least one value"));
            }
        }
        Ok(())
    }

    /// Cartesian product in axis order lr, weight_decay, random_pi_length,
    /// variant (last axis fastest).
    pub fn points(&self, base_seed: u64) -> Result<Vec<GridPoint>> {
        self.validate()?;
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &weight_decay in &self.weight_decay {
                for &random_pi_length in &self.random_pi_length {
                    for &variant in &self.variant {
                        let index = out.len();
                        let seed = if self.shared_seed {
                            base_seed
                        } else {
                            seed::derive(seed::derive(base_seed, stream::GRID_TRIAL), index as u64)
                        };
                        out.push(GridPoint {
                            index,
                            lr,
                            weight_decay,
                            random_pi_length,
                            variant,
                            seed,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

impl GridPoint {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            random_pi_length: self.random_pi_length,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug)]
pub struct TrialResult {
    pub point: GridPoint,
    pub output: std::result::Result<TrialOutput, Error>,
}

impl TrialResult {
    /// Best noisy-validation accuracy, `None` for failed trials or runs
    /// without a validation split.
    pub fn selection_key(&self) -> Option<f64> {
        let out = self.output.as_ref().ok()?;
        out.outcome.record.epochs[out.outcome.best_epoch].noisy_val_acc
    }
}

/// Trains every grid point on a pool of `workers` threads. Results are
/// ranked by best noisy-validation accuracy (descending, ties by index);
/// failed trials come last.
pub fn run_grid(
    grid: &GridSpec,
    ds: &PiDataset,
    arch: &Architecture,
    base: &TrainConfig,
    workers: usize,
) -> Result<Vec<TrialResult>> {
    use rayon::prelude::*;

    let points = grid.points(base.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Setup(format!("thread pool: {e}")))?;
    let mut results: Vec<TrialResult> = pool.install(|| {
        points
            .into_par_iter()
            .map(|point| {
                let cfg = point.config(base);
                let output = panic::catch_unwind(AssertUnwindSafe(|| run_trial(ds, arch, point.variant, &cfg)))
                    .unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "trial panicked".into());
                        Err(Error::Numeric(msg))
                    });
                TrialResult { point, output }
            })
            .collect()
    });
    results.sort_by(|a, b| {
        let ka = a.selection_key();
        let kb = b.selection_key();
        let fa = a.output.is_err();
        let fb = b.output.is_err();
        fa.cmp(&fb)
            .then_with(|| kb.partial_cmp(&ka).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.point.index.cmp(&b.point.index))
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_dataset, DatasetParts, SynthConfig};
    use crate::model::AblationFlags;

    fn small_data(noise_rate: f64, seed: u64) -> PiDataset {
        let cfg = SynthConfig {
            n: 400,
            d: 4,
            num_classes: 2,
            annotators: 4,
            noise_rate,
            seed,
            ..SynthConfig::default()
        };
        split_dataset(&generate_synthetic(&cfg).unwrap(), 0.15, 0.25, seed).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            base_lr: 0.05,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn small_arch() -> Architecture {
        Architecture {
            prediction_hidden: vec![16],
            pi_width: 8,
            ..Architecture::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let ds = small_data(0.0, 1);
        let err = run_trial(&ds, &small_arch(), Variant::CrossEntropy, &quick_cfg(0)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let ds = small_data(0.2, 1);
        let spec = small_arch().spec_for(&ds, Variant::PiDual);
        let model = PiDualModel::new(spec, 3).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..quick_cfg(1)
        };
        let out = train(model.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.final_model, model);
        assert_eq!(out.record.len(), 1);
    }

    #[test]
    fn separable_clean_data_is_learned() {
        let synth = SynthConfig {
            n: 600,
            d: 4,
            num_classes: 2,
            annotators: 2,
            noise_rate: 0.0,
            separation: 4.0,
            seed: 2,
            ..SynthConfig::default()
        };
        let raw = generate_synthetic(&synth).unwrap();
        // Nearest-center labels are the Bayes rule of the generator, so the
        // clean labels are reachable by the classifier up to boundary noise.
        let ds = split_dataset(&raw, 0.1, 0.3, 2).unwrap();
        let out = run_trial(&ds, &small_arch(), Variant::CrossEntropy, &quick_cfg(30)).unwrap();
        let acc = out.outcome.record.last().unwrap().clean_test_acc.unwrap();
        assert!(acc > 0.95, "clean test accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data(0.3, 4);
        let a = run_trial(&ds, &small_arch(), Variant::PiDual, &quick_cfg(3)).unwrap();
        let b = run_trial(&ds, &small_arch(), Variant::PiDual, &quick_cfg(3)).unwrap();
        assert_eq!(a.outcome.record, b.outcome.record);
        assert_eq!(a.outcome.final_model, b.outcome.final_model);
    }

    #[test]
    fn early_stopping_selection_is_consistent() {
        let ds = small_data(0.3, 6);
        let out = run_trial(&ds, &small_arch(), Variant::CrossEntropy, &quick_cfg(6)).unwrap().outcome;
        let best = out.record.best_epoch().unwrap();
        assert_eq!(best, out.best_epoch);
        let max = out
            .record
            .epochs
            .iter()
            .filter_map(|m| m.noisy_val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.record.epochs[best].noisy_val_acc, Some(max));
        assert!(out.record.epochs[..best].iter().all(|m| m.noisy_val_acc < Some(max)));
        let recomputed = evaluate(&out.best, &ds, Split::CleanTest, LabelSource::Clean, Head::Prediction).unwrap();
        assert_eq!(Some(recomputed), out.record.epochs[best].clean_test_acc);
    }

    #[test]
    fn accuracies_lie_in_unit_interval() {
        let ds = small_data(0.3, 8);
        let out = run_trial(&ds, &small_arch(), Variant::PiDual, &quick_cfg(2)).unwrap().outcome;
        for m in &out.record.epochs {
            for v in [
                m.train_acc_clean,
                m.train_acc_wrong,
                m.pred_acc_clean,
                m.pred_acc_wrong,
                m.noise_acc_clean,
                m.noise_acc_wrong,
                m.noisy_val_acc,
                m.clean_test_acc,
                m.mean_gate_clean,
                m.mean_gate_wrong,
            ] {
                let v = v.unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    fn constant_model(num_classes: usize, class: usize) -> (PiDualModel, PiDataset) {
        let labels = vec![class, class, class, (class + 1) % num_classes, class];
        let ds = PiDataset::from_parts(DatasetParts {
            feature_dim: 1,
            pi_dim: 1,
            num_classes,
            features: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            pi: vec![0.0; 5],
            noisy_labels: labels.clone(),
            clean_labels: Some(labels),
            split: None,
        })
        .unwrap();
        let spec = ModelSpec {
            x_dim: 1,
            pi_dim: 1,
            num_classes,
            prediction_hidden: vec![],
            pi_width: 2,
            shared_first_layer: true,
            ablation: AblationFlags::cross_entropy(),
        };
        let mut model = PiDualModel::new(spec, 0).unwrap();
        let layer = &mut model.prediction_mut().layers_mut()[0];
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
        layer.bias[class] = 1.0;
        (model, ds)
    }

    #[test]
    fn evaluate_counts_argmax_matches() {
        let (model, ds) = constant_model(3, 1);
        let acc = evaluate(&model, &ds, Split::Train, LabelSource::Noisy, Head::Prediction).unwrap();
        assert!((acc - 0.8).abs() < 1e-15);
        let (model, _) = constant_model(3, 0);
        let acc = evaluate(&model, &ds, Split::Train, LabelSource::Clean, Head::Combined).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn evaluate_three_of_five() {
        let (model, _) = constant_model(2, 0);
        let labels = vec![0, 1, 0, 1, 0];
        let ds = PiDataset::from_parts(DatasetParts {
            feature_dim: 1,
            pi_dim: 1,
            num_classes: 2,
            features: (0..5).map(|i| i as f64).collect(),
            pi: vec![0.0; 5],
            noisy_labels: labels,
            clean_labels: None,
            split: None,
        })
        .unwrap();
        let acc = evaluate(&model, &ds, Split::Train, LabelSource::Noisy, Head::Prediction).unwrap();
        assert!((acc - 0.6).abs() < 1e-15);
    }

    #[test]
    fn evaluate_errors() {
        let (model, ds) = constant_model(2, 0);
        assert!(matches!(
            evaluate(&model, &ds, Split::CleanTest, LabelSource::Noisy, Head::Prediction),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            evaluate(&model, &ds.without_clean_labels(), Split::Train, LabelSource::Clean, Head::Prediction),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            evaluate(&model, &ds, Split::Train, LabelSource::Noisy, Head::Noise),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fitting_never_reads_clean_labels() {
        let ds = small_data(0.3, 9);
        let spec = small_arch().spec_for(&ds, Variant::PiDual);
        let mut model = PiDualModel::new(spec, 1).unwrap();
        let cfg = quick_cfg(1);
        let mut opt = ModelOptimizer::new(&model, cfg.optimizer(), false).unwrap();
        let before = ds.clean_reads();
        let mut rng = seed::rng(1);
        for epoch in 0..2 {
            fit_epoch(&mut model, &mut opt, &ds.training_view(), epoch, 16, &mut rng).unwrap();
        }
        assert_eq!(ds.clean_reads(), before);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = small_data(0.3, 9);
        let spec = small_arch().spec_for(&ds, Variant::CrossEntropy);
        let mut model = PiDualModel::new(spec, 1).unwrap();
        model.prediction_mut().layers_mut()[0].bias[0] = f64::NAN;
        let err = train(model, &ds, &quick_cfg(1)).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("epoch 0"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_csv_round_trip() {
        let ds = small_data(0.3, 10);
        let out = run_trial(&ds, &small_arch(), Variant::NoNoiseNet, &quick_cfg(2)).unwrap().outcome;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.csv");
        out.record.write_csv(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "epoch,train_acc_clean,train_acc_wrong,pred_acc_clean,pred_acc_wrong,noise_acc_clean,noise_acc_wrong,noisy_val_acc,clean_test_acc,mean_gate_clean,mean_gate_wrong\n"
        ));
        assert_eq!(TrainRecord::read_csv(&path).unwrap(), out.record);
    }

    #[test]
    fn single_point_grid_matches_single_trial() {
        let ds = small_data(0.3, 11);
        let base = quick_cfg(2);
        let grid = GridSpec::single(&base, Variant::PiDual);
        let results = run_grid(&grid, &ds, &small_arch(), &base, 1).unwrap();
        assert_eq!(results.len(), 1);
        let direct = run_trial(&ds, &small_arch(), Variant::PiDual, &base).unwrap();
        assert_eq!(results[0].output.as_ref().unwrap().outcome.record, direct.outcome.record);
    }

    #[test]
    fn grid_ranking_and_duplicates() {
        let ds = small_data(0.3, 12);
        let base = quick_cfg(2);
        let grid = GridSpec {
            lr: vec![0.05, 0.01],
            weight_decay: vec![0.0, 1e-3],
            random_pi_length: vec![0],
            variant: vec![Variant::CrossEntropy],
            shared_seed: false,
        };
        let results = run_grid(&grid, &ds, &small_arch(), &base, 2).unwrap();
        assert_eq!(results.len(), 4);
        let keys: Vec<f64> = results.iter().map(|r| r.selection_key().unwrap()).collect();
        assert!(keys.windows(2).all(|w| w[0] >= w[1]));

        let dup = GridSpec {
            lr: vec![0.05, 0.05],
            weight_decay: vec![0.0],
            shared_seed: true,
            ..grid
        };
        let results = run_grid(&dup, &ds, &small_arch(), &base, 2).unwrap();
        let a = &results[0].output.as_ref().unwrap().outcome.record;
        let b = &results[1].output.as_ref().unwrap().outcome.record;
        assert_eq!(a, b);
    }

    #[test]
    fn failed_trials_are_marked_not_fatal() {
        let ds = small_data(0.3, 13);
        let base = quick_cfg(1);
        let grid = GridSpec {
            lr: vec![0.05],
            weight_decay: vec![0.0],
            random_pi_length: vec![0],
            variant: vec![Variant::OnlyRandomPi, Variant::CrossEntropy],
            shared_seed: false,
        };
        let results = run_grid(&grid, &ds, &small_arch(), &base, 1).unwrap();
        assert!(results[0].output.is_ok());
        assert!(results[1].output.is_err());
        assert_eq!(results[1].point.variant, Variant::OnlyRandomPi);
    }
}
