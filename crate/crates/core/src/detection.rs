//! Wrong-label detection scores, ROC-AUC and score histograms.
//!
//! Every score is oriented so that higher means more likely wrong.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PiDataset, Split};
use crate::error::{Error, Result};
use crate::model::PiDualModel;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Confidence,
    Gate,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Confidence => "confidence",
            Method::Gate => "gate",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "confidence" => Ok(Method::Confidence),
            "gate" => Ok(Method::Gate),
            _ => Err(format!("unknown detection method `{s}`")),
        }
    }
}

/// `softmax(f(x))[noisy label]` for each train-split sample.
pub fn confidence_scores(model: &PiDualModel, ds: &PiDataset) -> Result<Vec<f64>> {
    ds.indices(Split::Train)
        .into_iter()
        .map(|i| Ok(model.forward_infer(ds.features(i))?[ds.noisy_label(i)]))
        .collect()
}

/// Gate value for each train-split sample.
pub fn gate_scores(model: &PiDualModel, ds: &PiDataset) -> Result<Vec<f64>> {
    ds.indices(Split::Train)
        .into_iter()
        .map(|i| {
            model
                .gate_value(ds.features(i), ds.pi(i))?
                .ok_or_else(|| Error::Contract("model has no gate".into()))
        })
        .collect()
}

/// Wrongness scores for `method`: the gate directly, `1 - confidence` for
/// confidence.
pub fn wrongness_scores(model: &PiDualModel, ds: &PiDataset, method: Method) -> Result<Vec<f64>> {
    match method {
        Method::Confidence => Ok(confidence_scores(model, ds)?.into_iter().map(|c| 1.0 - c).collect()),
        Method::Gate => gate_scores(model, ds),
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half. Computed from midranks after one sort.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {i} is NaN")));
    }
    let n_pos = positives.iter().filter(|&&p| p).count() as u64;
    let n_neg = positives.len() as u64 - n_pos;
    if n_pos == 0 {
        return Err(Error::Contract("AUC needs at least one positive sample".into()));
    }
    if n_neg == 0 {
        return Err(Error::Contract("AUC needs at least one negative sample".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the sum of positive midranks (1-based), kept integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_group = order[start..end].iter().filter(|&&i| positives[i]).count() as u64;
        // midrank = (start + 1 + end) / 2
        twice_rank_sum += pos_in_group * (start as u64 + 1 + end as u64);
        start = end;
    }
    // Twice the Mann-Whitney U statistic.
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub clean_counts: Vec<u64>,
    pub wrong_counts: Vec<u64>,
}

/// Counts on [`HISTOGRAM_BINS`] uniform bins over [0, 1]; the last bin is
/// closed and values outside the interval are clamped into the end bins.
pub fn histogram(scores: &[f64], positives: &[bool]) -> Histogram {
    let bins = HISTOGRAM_BINS;
    let mut clean_counts = vec![0; bins];
    let mut wrong_counts = vec![0; bins];
    for (&s, &wrong) in scores.iter().zip(positives) {
        let b = ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        if wrong {
            wrong_counts[b] += 1;
        } else {
            clean_counts[b] += 1;
        }
    }
    Histogram {
        bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        clean_counts,
        wrong_counts,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: Method,
    pub auc: f64,
    pub bin_edges: Vec<f64>,
    pub clean_counts: Vec<u64>,
    pub wrong_counts: Vec<u64>,
    /// Raw method scores (confidence or gate), one per train sample.
    pub scores: Vec<f64>,
}

/// Train-split wrong-label flags; needs clean labels.
pub fn wrong_flags(ds: &PiDataset) -> Result<Vec<bool>> {
    if !ds.has_clean_labels() {
        return Err(Error::Contract(
            "detection AUC needs ground truth: the dataset has no clean_label column".into(),
        ));
    }
    Ok(ds
        .indices(Split::Train)
        .into_iter()
        .map(|i| ds.is_wrong(i).expect("clean labels present"))
        .collect())
}

pub fn detect(model: &PiDualModel, ds: &PiDataset, method: Method) -> Result<DetectionReport> {
    let wrong = wrong_flags(ds)?;
    let scores = match method {
        Method::Confidence => confidence_scores(model, ds)?,
        Method::Gate => gate_scores(model, ds)?,
    };
    let oriented: Vec<f64> = match method {
        Method::Confidence => scores.iter().map(|c| 1.0 - c).collect(),
        Method::Gate => scores.clone(),
    };
    let auc = roc_auc(&oriented, &wrong)?;
    let hist = histogram(&scores, &wrong);
    Ok(DetectionReport {
        method,
        auc,
        bin_edges: hist.bin_edges,
        clean_counts: hist.clean_counts,
        wrong_counts: hist.wrong_counts,
        scores,
    })
}

impl DetectionReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            row: e.line(),
            message: format!("detection report: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetParts;
    use crate::model::{AblationFlags, ModelSpec};
    use proptest::prelude::*;

    pub(crate) fn pair_count_auc(scores: &[f64], positives: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positives.iter().enumerate() {
            if !pi {
                continue;
            }
            for (j, &pj) in positives.iter().enumerate() {
                if pj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    total += 1.0;
                } else if scores[i] == scores[j] {
                    total += 0.5;
                }
            }
        }
        total / pairs
    }

    #[test]
    fn perfect_separation() {
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn small_case_matches_pair_counting() {
        let s = [0.6, 0.4, 0.5, 0.3];
        let p = [true, false, true, false];
        assert_eq!(roc_auc(&s, &p).unwrap(), pair_count_auc(&s, &p));
    }

    #[test]
    fn degenerate_classes_named() {
        let err = roc_auc(&[0.1, 0.2], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("positive"));
        let err = roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert!(err.to_string().contains("negative"));
    }

    fn toy() -> (PiDualModel, PiDataset) {
        let labels = vec![0, 1, 2, 1];
        let ds = PiDataset::from_parts(DatasetParts {
            feature_dim: 2,
            pi_dim: 2,
            num_classes: 3,
            features: vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8, 2.0, -2.0],
            pi: vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, -1.0, 2.0],
            noisy_labels: labels.clone(),
            clean_labels: Some(vec![0, 1, 1, 0]),
            split: None,
        })
        .unwrap();
        let spec = ModelSpec {
            x_dim: 2,
            pi_dim: 2,
            num_classes: 3,
            prediction_hidden: vec![],
            pi_width: 3,
            shared_first_layer: true,
            ablation: AblationFlags::full(),
        };
        (PiDualModel::new(spec, 21).unwrap(), ds)
    }

    #[test]
    fn uniform_logits_give_one_over_k() {
        let (mut model, ds) = toy();
        let layer = &mut model.prediction_mut().layers_mut()[0];
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        for c in confidence_scores(&model, &ds).unwrap() {
            assert!((c - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_confidence_is_one() {
        let (mut model, ds) = toy();
        let layer = &mut model.prediction_mut().layers_mut()[0];
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.bias = vec![60.0, 0.0, 0.0];
        assert!(confidence_scores(&model, &ds).unwrap()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn confidence_matches_scalar_softmax() {
        let (model, ds) = toy();
        let layer = &model.prediction().layers()[0];
        let scores = confidence_scores(&model, &ds).unwrap();
        for (i, score) in scores.iter().enumerate() {
            let x = ds.features(i);
            let z: Vec<f64> = (0..3)
                .map(|k| layer.bias[k] + layer.weights[2 * k] * x[0] + layer.weights[2 * k + 1] * x[1])
                .collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let expected = z[ds.noisy_label(i)].exp() / denom;
            assert!((score - expected).abs() < 1e-14);
        }
    }

    fn last_gate_layer(model: &mut PiDualModel) -> &mut crate::nn::Dense {
        let layers = model.gate_head_mut().layers_mut();
        let last = layers.len() - 1;
        &mut layers[last]
    }

    #[test]
    fn forced_gate_scores() {
        let (mut model, ds) = toy();
        let layer = last_gate_layer(&mut model);
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.bias[0] = -40.0;
        assert!(gate_scores(&model, &ds).unwrap().iter().all(|&g| g < 1e-6));
        last_gate_layer(&mut model).bias[0] = 0.0;
        assert!(gate_scores(&model, &ds).unwrap().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn gate_matches_scalar_sigmoid() {
        let (model, ds) = toy();
        let nets = model.subnetworks();
        let trunk = &nets[1].1.layers()[0];
        let head = nets.last().unwrap().1.layers();
        let scores = gate_scores(&model, &ds).unwrap();
        for (i, score) in scores.iter().enumerate() {
            let a = ds.pi(i);
            let dense = |layer: &crate::nn::Dense, input: &[f64], relu: bool| -> Vec<f64> {
                (0..layer.out_dim)
                    .map(|o| {
                        let mut z = layer.bias[o];
                        for (j, v) in input.iter().enumerate() {
                            z += layer.weights[o * layer.in_dim + j] * v;
                        }
                        if relu {
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect()
            };
            let h = dense(trunk, a, true);
            let h = dense(&head[0], &h, true);
            let z = dense(&head[1], &h, false)[0];
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((score - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn report_round_trip_and_counts() {
        let (model, ds) = toy();
        let report = detect(&model, &ds, Method::Gate).unwrap();
        assert_eq!(report.scores.len(), 4);
        assert_eq!(report.bin_edges.len(), HISTOGRAM_BINS + 1);
        assert_eq!(report.wrong_counts.iter().sum::<u64>(), 2);
        assert_eq!(report.clean_counts.iter().sum::<u64>(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        report.save(&path).unwrap();
        assert_eq!(DetectionReport::load(&path).unwrap(), report);
    }

    #[test]
    fn missing_clean_labels_explained() {
        let (model, ds) = toy();
        let err = detect(&model, &ds.without_clean_labels(), Method::Confidence).unwrap_err();
        assert!(err.to_string().contains("ground truth"));
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[0.0, 0.05, 0.999, 1.0], &[false, true, false, true]);
        assert_eq!(h.clean_counts[0], 1);
        assert_eq!(h.wrong_counts[1], 1);
        assert_eq!(h.clean_counts[19], 1);
        assert_eq!(h.wrong_counts[19], 1);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=200).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..5).prop_map(|v| v as f64 / 4.0), -1.0..1.0f64], n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, p)| p.iter().any(|&b| b) && p.iter().any(|&b| !b))
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pair_counting((s, p) in instance()) {
            prop_assert_eq!(roc_auc(&s, &p).unwrap(), pair_count_auc(&s, &p));
        }

        #[test]
        fn complement_symmetry((s, p) in instance()) {
            let flipped: Vec<bool> = p.iter().map(|b| !b).collect();
            let sum = roc_auc(&s, &p).unwrap() + roc_auc(&s, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((s, p) in instance()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
            prop_assert_eq!(roc_auc(&s, &p).unwrap(), roc_auc(&t, &p).unwrap());
        }
    }
}
