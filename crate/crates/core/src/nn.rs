//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`. A forward
//! pass returns a [`Tape`] holding every layer input and activation output;
//! [`Mlp::backward`] consumes it to produce gradients of `output · upstream`
//! with respect to every parameter and to the input.
//!
//! Each [`Mlp`] carries a version counter that is bumped on every mutable
//! access. Tapes record the version they were produced at, so a backward
//! pass against parameters that changed since the forward pass is rejected.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Logistic output, clamped to the open interval (0, 1).
    Sigmoid,
}

/// Largest double strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z < 0.0 {
                    0.0
                } else {
                    z
                }
            }
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// He-style init: `N(0, 2 / fan_in)` weights, zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn check(&self, index: usize) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::Shape(format!(
                "layer {index}: buffers do not match declared {}x{}",
                self.out_dim, self.in_dim
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("layer {index}: non-finite parameter")));
        }
        Ok(())
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// An ordered stack of dense layers.
#[derive(Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    #[serde(skip, default = "fresh_version")]
    version: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Mlp {
            layers: self.layers.clone(),
            version: fresh_version(),
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            layer.check(k)?;
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Mlp {
            layers,
            version: fresh_version(),
        })
    }

    /// Builds `sizes.len() - 1` layers with He init; `activations` gives one
    /// activation per layer.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::Shape(format!(
                "{} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Dense::he_init(w[0], w[1], act, rng))
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        for layer in &self.layers {
            let z = affine(layer, &current);
            let y: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(current);
            pre.push(z);
            current = y;
        }
        let tape = Tape {
            version: self.version,
            inputs,
            pre,
            output: current.clone(),
        };
        Ok((current, tape))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut z = affine(layer, &current);
            z.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            current = z;
        }
        Ok(current)
    }

    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backward_into(tape, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Accumulates parameter gradients into `grads` (added, not overwritten)
    /// and returns the input gradient.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream has {} entries, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if !grads.congruent_with(self) {
            return Err(Error::Shape("gradient buffers do not match network".into()));
        }
        let mut delta = upstream.to_vec();
        let last = self.layers.len() - 1;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let z = &tape.pre[k];
            let x = &tape.inputs[k];
            let out: &[f64] = if k == last { &tape.output } else { &tape.inputs[k + 1] };
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(z[j], out[j]);
            }
            let g = &mut grads.layers[k];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[j] += d;
                let row = &mut g.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
                for (w, &xi) in row.iter_mut().zip(x) {
                    *w += d * xi;
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
                for (acc, &w) in dx.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::Contract(
                "tape was recorded against a different parameter state".into(),
            ));
        }
        if tape.inputs.len() != self.layers.len()
            || tape
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.len() != l.out_dim)
        {
            return Err(Error::Contract("tape does not match network shape".into()));
        }
        Ok(())
    }
}

fn affine(layer: &Dense, x: &[f64]) -> Vec<f64> {
    layer
        .weights
        .chunks_exact(layer.in_dim.max(1))
        .zip(&layer.bias)
        .map(|(row, &b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Activation cache of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffers, shape-congruent with the [`Mlp`] they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn congruent_with(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self
                .layers
                .iter()
                .zip(&mlp.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.layers {
            g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v = 0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened view in layer order, weights before bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy: `-log softmax(logits)[label]` and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax_ce on empty logits".into()));
    }
    if label >= logits.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let logp = log_softmax(logits);
    let loss = -logp[label];
    let mut grad: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    Ok((if loss < 0.0 { 0.0 } else { loss }, grad))
}

/// SGD with Nesterov momentum, weight decay and a step learning-rate schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (0-based) from which the next decay applies.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("train.decay_epochs", "must be sorted ascending"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: Gradients,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(mlp: &Mlp, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            velocity: Gradients::zeros_like(mlp),
            step: 0,
        })
    }
}

/// One Nesterov step: `v <- mu v - lr g`, `w <- w + mu v - lr g`, where
/// `g` includes `weight_decay * w` on weight matrices unless `decay_exempt`.
pub fn sgd_step(
    params: &mut Mlp,
    grads: &Gradients,
    state: &mut OptimizerState,
    epoch: usize,
    decay_exempt: bool,
) -> Result<()> {
    if !grads.congruent_with(params) || !state.velocity.congruent_with(params) {
        return Err(Error::Shape("gradient/velocity buffers do not match network".into()));
    }
    for (k, g) in grads.layers.iter().enumerate() {
        if let Some(i) = g.weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {k} weight gradient [{i}] is not finite")));
        }
        if let Some(i) = g.bias.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {k} bias gradient [{i}] is not finite")));
        }
    }
    let lr = state.config.lr_at(epoch);
    let mu = state.config.momentum;
    let wd = if decay_exempt { 0.0 } else { state.config.weight_decay };
    for ((layer, g), v) in params
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        for ((w, &gw), vw) in layer.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
            let step = gw + wd * *w;
            *vw = mu * *vw - lr * step;
            *w += mu * *vw - lr * step;
        }
        for ((b, &gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = mu * *vb - lr * gb;
            *b += mu * *vb - lr * gb;
        }
    }
    state.step += 1;
    Ok(())
}
