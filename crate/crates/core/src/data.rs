//! Datasets of `(x, noisy label; pi)` triplets with hidden clean labels.
//!
//! Clean labels and the wrong-label indicator are evaluation-only. They are
//! reachable only through audited accessors ([`PiDataset::clean_label`],
//! [`PiDataset::is_wrong`]); every read bumps a counter so tests can assert
//! that the fitting path never touches them. The fitting path itself works on
//! a [`TrainingView`], which exposes the train split's features, privileged
//! features and noisy labels and nothing else.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    NoisyVal,
    CleanTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::NoisyVal => "noisy_val",
            Split::CleanTest => "clean_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "noisy_val" => Ok(Split::NoisyVal),
            "clean_test" => Ok(Split::CleanTest),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug)]
pub struct PiDataset {
    n: usize,
    feature_dim: usize,
    pi_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    pi: Vec<f64>,
    noisy_labels: Vec<usize>,
    clean_labels: Option<Vec<usize>>,
    split: Vec<Split>,
    /// Trailing PI columns that are random identifiers.
    random_pi_columns: usize,
    clean_reads: AtomicUsize,
}

impl Clone for PiDataset {
    fn clone(&self) -> Self {
        PiDataset {
            n: self.n,
            feature_dim: self.feature_dim,
            pi_dim: self.pi_dim,
            num_classes: self.num_classes,
            features: self.features.clone(),
            pi: self.pi.clone(),
            noisy_labels: self.noisy_labels.clone(),
            clean_labels: self.clean_labels.clone(),
            split: self.split.clone(),
            random_pi_columns: self.random_pi_columns,
            clean_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for PiDataset {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.feature_dim == other.feature_dim
            && self.pi_dim == other.pi_dim
            && self.num_classes == other.num_classes
            && self.features == other.features
            && self.pi == other.pi
            && self.noisy_labels == other.noisy_labels
            && self.clean_labels == other.clean_labels
            && self.split == other.split
            && self.random_pi_columns == other.random_pi_columns
    }
}

/// Raw parts for [`PiDataset::from_parts`]. Matrices are row-major.
#[derive(Clone, Debug, Default)]
pub struct DatasetParts {
    pub feature_dim: usize,
    pub pi_dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub pi: Vec<f64>,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    /// Defaults to all-train when `None`.
    pub split: Option<Vec<Split>>,
}

impl PiDataset {
    pub fn from_parts(parts: DatasetParts) -> Result<Self> {
        let n = parts.noisy_labels.len();
        if parts.num_classes < 2 {
            return Err(Error::Shape("need at least two classes".into()));
        }
        if parts.features.len() != n * parts.feature_dim {
            return Err(Error::Shape(format!(
                "feature buffer has {} values, expected {n}x{}",
                parts.features.len(),
                parts.feature_dim
            )));
        }
        if parts.pi.len() != n * parts.pi_dim {
            return Err(Error::Shape(format!(
                "pi buffer has {} values, expected {n}x{}",
                parts.pi.len(),
                parts.pi_dim
            )));
        }
        if let Some(i) = parts.noisy_labels.iter().position(|&y| y >= parts.num_classes) {
            return Err(Error::Shape(format!("noisy label of sample {i} >= K")));
        }
        if let Some(clean) = &parts.clean_labels {
            if clean.len() != n {
                return Err(Error::Shape("clean label count differs from sample count".into()));
            }
            if let Some(i) = clean.iter().position(|&y| y >= parts.num_classes) {
                return Err(Error::Shape(format!("clean label of sample {i} >= K")));
            }
        }
        let split = parts.split.unwrap_or_else(|| vec![Split::Train; n]);
        if split.len() != n {
            return Err(Error::Shape("split tag count differs from sample count".into()));
        }
        Ok(PiDataset {
            n,
            feature_dim: parts.feature_dim,
            pi_dim: parts.pi_dim,
            num_classes: parts.num_classes,
            features: parts.features,
            pi: parts.pi,
            noisy_labels: parts.noisy_labels,
            clean_labels: parts.clean_labels,
            split,
            random_pi_columns: 0,
            clean_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn pi_dim(&self) -> usize {
        self.pi_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn random_pi_columns(&self) -> usize {
        self.random_pi_columns
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn pi(&self, i: usize) -> &[f64] {
        &self.pi[i * self.pi_dim..(i + 1) * self.pi_dim]
    }

    pub fn noisy_label(&self, i: usize) -> usize {
        self.noisy_labels[i]
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n).filter(|&i| self.split[i] == split).collect()
    }

    pub fn has_clean_labels(&self) -> bool {
        self.clean_labels.is_some()
    }

    /// Evaluation-only. Audited.
    pub fn clean_label(&self, i: usize) -> Option<usize> {
        self.clean_reads.fetch_add(1, Ordering::Relaxed);
        self.clean_labels.as_ref().map(|c| c[i])
    }

    /// Evaluation-only. Audited.
    pub fn is_wrong(&self, i: usize) -> Option<bool> {
        self.clean_label(i).map(|c| c != self.noisy_labels[i])
    }

    /// Number of audited clean-label reads since construction.
    pub fn clean_reads(&self) -> usize {
        self.clean_reads.load(Ordering::Relaxed)
    }

    /// Fraction of wrong labels on the train split, if clean labels exist.
    pub fn realized_noise_rate(&self) -> Option<f64> {
        let train = self.indices(Split::Train);
        if train.is_empty() {
            return None;
        }
        let mut wrong = 0usize;
        for &i in &train {
            if self.is_wrong(i)? {
                wrong += 1;
            }
        }
        Some(wrong as f64 / train.len() as f64)
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            ds: self,
            indices: self.indices(Split::Train),
        }
    }

    /// Drops every PI column except the trailing random identifiers.
    pub fn only_random_pi(&self) -> PiDataset {
        let keep = self.random_pi_columns;
        let start = self.pi_dim - keep;
        let mut pi = Vec::with_capacity(self.n * keep);
        for i in 0..self.n {
            pi.extend_from_slice(&self.pi(i)[start..]);
        }
        let mut out = self.clone();
        out.pi = pi;
        out.pi_dim = keep;
        out
    }

    /// Copy without clean labels, as a dataset loaded from a file lacking them.
    pub fn without_clean_labels(&self) -> PiDataset {
        let mut out = self.clone();
        out.clean_labels = None;
        out
    }
}

/// Training-facing view: train split only, no clean labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSample<'a> {
    pub features: &'a [f64],
    pub pi: &'a [f64],
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TrainingView<'a> {
    ds: &'a PiDataset,
    indices: Vec<usize>,
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The `k`-th training sample.
    pub fn sample(&self, k: usize) -> TrainingSample<'a> {
        let i = self.indices[k];
        TrainingSample {
            features: self.ds.features(i),
            pi: self.ds.pi(i),
            label: self.ds.noisy_label(i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Wrong label drawn uniformly from the other classes.
    UniformWrong,
    /// Wrong label given by a fixed per-annotator derangement of the classes.
    AnnotatorPermutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
    pub annotators: usize,
    /// Per-annotator probability of a correct label. Empty means every
    /// annotator has reliability `1 - noise_rate`.
    pub reliabilities: Vec<f64>,
    pub pi_informativeness: f64,
    pub separation: f64,
    pub feature_noise: f64,
    /// Std of the Gaussian jitter on the switch-correlated PI channel,
    /// relative to its ±1 signal.
    pub switch_channel_noise: f64,
    pub error_mode: ErrorMode,
    /// Probability that a sample's annotator comes from the pool serving its
    /// cluster (annotator `j` serves cluster `j mod K`) instead of from all
    /// annotators. Non-zero values make the noise depend on `x`.
    pub annotator_affinity: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            d: 8,
            num_classes: 4,
            annotators: 8,
            reliabilities: Vec::new(),
            pi_informativeness: 1.0,
            separation: 3.0,
            feature_noise: 1.0,
            switch_channel_noise: 0.5,
            error_mode: ErrorMode::UniformWrong,
            annotator_affinity: 0.0,
            noise_rate: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("data.synthetic.{f}");
        if self.n == 0 {
            return Err(Error::config(field("n"), "must be >= 1"));
        }
        if self.d == 0 {
            return Err(Error::config(field("d"), "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(field("num_classes"), "must be >= 2"));
        }
        if self.annotators == 0 {
            return Err(Error::config(field("annotators"), "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config(field("noise_rate"), "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.annotator_affinity) {
            return Err(Error::config(field("annotator_affinity"), "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.pi_informativeness) {
            return Err(Error::config(field("pi_informativeness"), "must lie in [0, 1]"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::config(field("separation"), "must be finite and >= 0"));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise > 0.0) {
            return Err(Error::config(field("feature_noise"), "must be finite and > 0"));
        }
        if !(self.switch_channel_noise.is_finite() && self.switch_channel_noise >= 0.0) {
            return Err(Error::config(field("switch_channel_noise"), "must be finite and >= 0"));
        }
        if !self.reliabilities.is_empty() {
            if self.reliabilities.len() != self.annotators {
                return Err(Error::config(
                    field("reliabilities"),
                    format!("expected {} entries, got {}", self.annotators, self.reliabilities.len()),
                ));
            }
            if self.reliabilities.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::config(field("reliabilities"), "entries must lie in [0, 1]"));
            }
        }
        self.assignment_weights().map(|_| ())
    }

    pub fn reliabilities(&self) -> Vec<f64> {
        if self.reliabilities.is_empty() {
            vec![1.0 - self.noise_rate; self.annotators]
        } else {
            self.reliabilities.clone()
        }
    }

    /// Global annotator assignment probabilities, an exponential tilt
    /// `w_j ∝ exp(λ (1 - r_j))` with λ found by bisection so that the
    /// expected error rate (including cluster-affine draws) equals
    /// `noise_rate`; uniform when every annotator has the same reliability.
    pub fn assignment_weights(&self) -> Result<Vec<f64>> {
        let errors: Vec<f64> = self.reliabilities().iter().map(|r| 1.0 - r).collect();
        let target = self.noise_rate;
        let tol = 1e-9;
        let tilted = |lambda: f64| -> Vec<f64> {
            let max = errors.iter().map(|&e| lambda * e).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = errors.iter().map(|&e| (lambda * e - max).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        };
        let expected = |lambda: f64| self.expected_error(&tilted(lambda), &errors);
        // Large enough for the tilt to collapse onto the extreme annotators.
        let edge = 1e6;
        let (lo, hi) = (expected(-edge), expected(edge));
        if target < lo - tol || target > hi + tol {
            return Err(Error::config(
                "data.synthetic.noise_rate",
                format!("noise rate {target} unreachable with this assignment (range [{lo}, {hi}])"),
            ));
        }
        if hi - lo <= tol {
            return Ok(tilted(0.0));
        }
        if (target - lo).abs() <= tol {
            return Ok(tilted(-edge));
        }
        if (target - hi).abs() <= tol {
            return Ok(tilted(edge));
        }
        let (mut a, mut b) = (-1.0f64, 1.0f64);
        while expected(a) > target {
            a *= 2.0;
        }
        while expected(b) < target {
            b *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if expected(mid) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(tilted(0.5 * (a + b)))
    }

    /// Annotator distribution for samples of `cluster`.
    fn annotator_distribution(&self, weights: &[f64], cluster: usize, affine: bool) -> Vec<f64> {
        if !affine {
            return weights.to_vec();
        }
        let k = self.num_classes;
        let pool: Vec<f64> = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| if j % k == cluster { w } else { 0.0 })
            .collect();
        let mass: f64 = pool.iter().sum();
        if mass > 0.0 {
            pool.into_iter().map(|w| w / mass).collect()
        } else {
            weights.to_vec()
        }
    }

    fn expected_error(&self, weights: &[f64], errors: &[f64]) -> f64 {
        let mean = |w: &[f64]| w.iter().zip(errors).map(|(a, b)| a * b).sum::<f64>();
        let global = mean(weights);
        let alpha = self.annotator_affinity;
        if alpha == 0.0 {
            return global;
        }
        let k = self.num_classes;
        let affine = (0..k)
            .map(|c| mean(&self.annotator_distribution(weights, c, true)))
            .sum::<f64>()
            / k as f64;
        (1.0 - alpha) * global + alpha * affine
    }

    /// Per-annotator class derangements used by
    /// [`ErrorMode::AnnotatorPermutation`]; a pure function of the seed.
    pub fn permutations(&self) -> Vec<Vec<usize>> {
        let mut rng = seed::rng(seed::derive(self.seed, STREAM_PERMUTATIONS));
        (0..self.annotators)
            .map(|_| {
                let mut perm: Vec<usize> = (0..self.num_classes).collect();
                loop {
                    perm.shuffle(&mut rng);
                    if perm.iter().enumerate().all(|(c, &p)| c != p) {
                        break perm;
                    }
                }
            })
            .collect()
    }

    /// Class centers; orthogonal axes scaled by `separation` when `K <= d`,
    /// otherwise random directions of the same norm.
    pub fn class_centers(&self) -> Vec<Vec<f64>> {
        if self.num_classes <= self.d {
            return (0..self.num_classes)
                .map(|c| {
                    let mut v = vec![0.0; self.d];
                    v[c] = self.separation;
                    v
                })
                .collect();
        }
        let mut rng = seed::rng(seed::derive(self.seed, STREAM_CENTERS));
        (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * self.separation / norm).collect()
            })
            .collect()
    }

    /// Width of the generated PI: annotator one-hot, reliability channel,
    /// switch-correlated channel.
    pub fn pi_dim(&self) -> usize {
        self.annotators + 2
    }
}

const STREAM_SAMPLES: u64 = 100;
const STREAM_PI_CHANNELS: u64 = 101;
const STREAM_PERMUTATIONS: u64 = 102;
const STREAM_CENTERS: u64 = 103;

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    let mut best_d = dist(&centers[0]);
    for (k, c) in centers.iter().enumerate().skip(1) {
        let d = dist(c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Samples a dataset from the switch-and-error annotation model: each
/// sample's label is the ground truth unless its annotator's switch fires,
/// in which case an annotator-driven wrong label replaces it.
///
/// Labels and features come from one random stream and the PI channels from
/// another, so changing `pi_informativeness` leaves `x`, `y` and the noisy
/// labels untouched.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<PiDataset> {
    cfg.validate()?;
    let weights = cfg.assignment_weights()?;
    let reliabilities = cfg.reliabilities();
    let centers = cfg.class_centers();
    let perms = cfg.permutations();
    let k = cfg.num_classes;
    let inf = cfg.pi_informativeness;
    let mean_reliability: f64 = weights.iter().zip(&reliabilities).map(|(w, r)| w * r).sum();

    let mut rng = seed::rng(seed::derive(cfg.seed, STREAM_SAMPLES));
    let mut pi_rng = seed::rng(seed::derive(cfg.seed, STREAM_PI_CHANNELS));
    let pi_dim = cfg.pi_dim();

    let mut features = Vec::with_capacity(cfg.n * cfg.d);
    let mut pi = Vec::with_capacity(cfg.n * pi_dim);
    let mut noisy = Vec::with_capacity(cfg.n);
    let mut clean = Vec::with_capacity(cfg.n);

    let pools: Vec<Vec<f64>> = (0..k)
        .map(|c| cfg.annotator_distribution(&weights, c, true))
        .collect();

    for _ in 0..cfg.n {
        let cluster = rng.gen_range(0..k);
        let affine = rng.gen::<f64>() < cfg.annotator_affinity;
        let annotator = if affine {
            categorical(&pools[cluster], &mut rng)
        } else {
            categorical(&weights, &mut rng)
        };
        let x: Vec<f64> = centers[cluster]
            .iter()
            .map(|&c| c + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y = nearest(&centers, &x);
        let switched = rng.gen::<f64>() < 1.0 - reliabilities[annotator];
        let other = rng.gen_range(0..k - 1);
        let label = if !switched {
            y
        } else {
            match cfg.error_mode {
                ErrorMode::UniformWrong => {
                    if other >= y {
                        other + 1
                    } else {
                        other
                    }
                }
                ErrorMode::AnnotatorPermutation => perms[annotator][y],
            }
        };

        let informative_sign = pi_rng.gen::<f64>() < inf;
        let coin = pi_rng.gen::<bool>();
        let jitter: f64 = pi_rng.sample(StandardNormal);
        let sign = if informative_sign { switched } else { coin };
        let sign = if sign { 1.0 } else { -1.0 };

        features.extend_from_slice(&x);
        pi.extend((0..cfg.annotators).map(|j| if j == annotator { 1.0 } else { 0.0 }));
        pi.push(inf * reliabilities[annotator] + (1.0 - inf) * mean_reliability);
        pi.push(inf * (sign + cfg.switch_channel_noise * jitter));
        noisy.push(label);
        clean.push(y);
    }

    PiDataset::from_parts(DatasetParts {
        feature_dim: cfg.d,
        pi_dim,
        num_classes: k,
        features,
        pi,
        noisy_labels: noisy,
        clean_labels: Some(clean),
        split: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomPiSpec {
    pub length: usize,
    pub seed: u64,
}

/// Appends `spec.length` i.i.d. standard-normal identifier columns per sample.
pub fn augment_random_pi(ds: &PiDataset, spec: RandomPiSpec) -> PiDataset {
    if spec.length == 0 {
        return ds.clone();
    }
    let mut rng = seed::rng(seed::derive(spec.seed, seed::stream::RANDOM_PI));
    let new_dim = ds.pi_dim + spec.length;
    let mut pi = Vec::with_capacity(ds.n * new_dim);
    for i in 0..ds.n {
        pi.extend_from_slice(ds.pi(i));
        pi.extend((0..spec.length).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let mut out = ds.clone();
    out.pi = pi;
    out.pi_dim = new_dim;
    out.random_pi_columns += spec.length;
    out
}

/// Random disjoint assignment: `round(n * test_fraction)` clean-test samples,
/// `round(n * noisy_val_fraction)` noisy-validation samples, the rest train.
pub fn split_dataset(
    ds: &PiDataset,
    noisy_val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<PiDataset> {
    if !(noisy_val_fraction >= 0.0 && test_fraction >= 0.0) {
        return Err(Error::config("data.split", "fractions must be >= 0"));
    }
    if noisy_val_fraction + test_fraction >= 1.0 {
        return Err(Error::config("data.split", "fractions must sum to < 1"));
    }
    let n = ds.n;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * noisy_val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, seed::stream::SPLIT)));
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_test] {
        split[i] = Split::CleanTest;
    }
    for &i in &order[n_test..(n_test + n_val).min(n)] {
        split[i] = Split::NoisyVal;
    }
    let mut out = ds.clone();
    out.split = split;
    Ok(out)
}

/// Expected CSV layout. Column counts are inferred from the header when
/// `None`; otherwise they must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub num_classes: usize,
    pub feature_dim: Option<usize>,
    pub pi_dim: Option<usize>,
}

impl CsvSchema {
    pub fn with_classes(num_classes: usize) -> Self {
        CsvSchema {
            num_classes,
            feature_dim: None,
            pi_dim: None,
        }
    }
}

fn header_error(message: impl Into<String>) -> Error {
    Error::Parse {
        row: 1,
        message: message.into(),
    }
}

/// Reads `x0..x{d-1}, a0..a{p-1}, noisy_label[, clean_label][, split]`.
/// Row numbers in errors are 1-based file lines (the header is row 1).
pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<PiDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => header_error(format!("{other:?}")),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| header_error(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();

    let mut col = 0;
    let mut d = 0;
    while col < header.len() && header[col] == format!("x{d}") {
        d += 1;
        col += 1;
    }
    let mut p = 0;
    while col < header.len() && header[col] == format!("a{p}") {
        p += 1;
        col += 1;
    }
    if header.get(col).map(String::as_str) != Some("noisy_label") {
        let found = header.get(col).cloned().unwrap_or_else(|| "end of header".into());
        return Err(header_error(format!(
            "missing column `noisy_label` (expected at position {col}, found `{found}`)"
        )));
    }
    col += 1;
    let has_clean = header.get(col).map(String::as_str) == Some("clean_label");
    if has_clean {
        col += 1;
    }
    let has_split = header.get(col).map(String::as_str) == Some("split");
    if has_split {
        col += 1;
    }
    if col != header.len() {
        return Err(header_error(format!("unexpected column `{}`", header[col])));
    }
    if let Some(expected) = schema.feature_dim {
        if expected != d {
            return Err(header_error(format!("expected {expected} feature columns, found {d}")));
        }
    }
    if let Some(expected) = schema.pi_dim {
        if expected != p {
            return Err(header_error(format!("expected {expected} PI columns, found {p}")));
        }
    }

    let k = schema.num_classes;
    let mut features = Vec::new();
    let mut pi = Vec::new();
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    let mut split = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        let real = |c: usize| -> Result<f64> {
            let cell = &record[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    message: format!("column `{}`: `{cell}` is not a finite number", header[c]),
                })
        };
        let label = |c: usize| -> Result<usize> {
            let cell = &record[c];
            let v: usize = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column `{}`: `{cell}` is not a class index", header[c]),
            })?;
            if v >= k {
                return Err(Error::Parse {
                    row,
                    message: format!("column `{}`: label {v} >= K = {k}", header[c]),
                });
            }
            Ok(v)
        };
        for c in 0..d {
            features.push(real(c)?);
        }
        for c in d..d + p {
            pi.push(real(c)?);
        }
        noisy.push(label(d + p)?);
        if has_clean {
            clean.push(label(d + p + 1)?);
        }
        if has_split {
            let c = d + p + 1 + usize::from(has_clean);
            split.push(record[c].parse::<Split>().map_err(|message| Error::Parse { row, message })?);
        }
    }

    PiDataset::from_parts(DatasetParts {
        feature_dim: d,
        pi_dim: p,
        num_classes: k,
        features,
        pi,
        noisy_labels: noisy,
        clean_labels: has_clean.then_some(clean),
        split: has_split.then_some(split),
    })
}

/// Writes the dataset in the [`load_csv`] layout, always including the
/// split column and the clean-label column when clean labels are present.
pub fn save_csv(ds: &PiDataset, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut header: Vec<String> = (0..ds.feature_dim).map(|j| format!("x{j}")).collect();
    header.extend((0..ds.pi_dim).map(|j| format!("a{j}")));
    header.push("noisy_label".into());
    if ds.clean_labels.is_some() {
        header.push("clean_label".into());
    }
    header.push("split".into());
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    writer.write_record(&header).map_err(io)?;
    for i in 0..ds.n {
        let mut row: Vec<String> = ds.features(i).iter().map(|v| v.to_string()).collect();
        row.extend(ds.pi(i).iter().map(|v| v.to_string()));
        row.push(ds.noisy_labels[i].to_string());
        if let Some(clean) = &ds.clean_labels {
            row.push(clean[i].to_string());
        }
        row.push(ds.split[i].to_string());
        writer.write_record(&row).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
