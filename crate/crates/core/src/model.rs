//! The gated dual network.
//!
//! During training the output logits are
//!
//! ```text
//! h(x, a) = (1 - g(a)) * f(x) + g(a) * e(a)
//! ```
//!
//! where `f` is the prediction network on the regular features, `e` the
//! noise network on the privileged features and `g` a sigmoid gate on the
//! privileged features. The gate shares the noise network's first layer by
//! default. Inference uses `softmax(f(x))` only.
//!
//! [`AblationFlags`] switch off parts of the architecture:
//!
//! * `use_gate = false`: the gate is dropped and the logits are `f + e`.
//! * `use_noise_net = false`: `e ≡ 0`, so the logits are `(1 - g) f`.
//! * `gate_space = Probability`: the mixture is taken between
//!   `softmax(f)` and `softmax(e)` and the loss is `-log` of the mixed
//!   probability of the observed label.
//! * `noise_input = PiAndX`: the noise/gate trunk sees `[a, x]`.
//! * `fixed_gate = Some(c)`: the gate is the constant `c` (no gate network).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::RandomPiSpec;
use crate::error::{Error, Result};
use crate::nn::{
    self, log_softmax, sgd_step, softmax, Activation, Gradients, Mlp, OptimizerConfig,
    OptimizerState, Tape,
};
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSpace {
    Logit,
    Probability,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInput {
    PiOnly,
    PiAndX,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_gate: bool,
    pub use_noise_net: bool,
    pub gate_space: GateSpace,
    pub noise_input: NoiseInput,
    pub fixed_gate: Option<f64>,
}

impl AblationFlags {
    pub fn full() -> Self {
        AblationFlags {
            use_gate: true,
            use_noise_net: true,
            gate_space: GateSpace::Logit,
            noise_input: NoiseInput::PiOnly,
            fixed_gate: None,
        }
    }

    /// Prediction network alone: plain cross-entropy on `f(x)`.
    pub fn cross_entropy() -> Self {
        AblationFlags {
            use_gate: false,
            use_noise_net: false,
            ..AblationFlags::full()
        }
    }

    fn learned_gate(&self) -> bool {
        self.use_gate && self.fixed_gate.is_none()
    }
}

/// The named model variants compared by the ablation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CrossEntropy,
    PiDual,
    NoGate,
    NoNoiseNet,
    GateProbSpace,
    OnlyRandomPi,
    NoiseWithX,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::CrossEntropy,
        Variant::PiDual,
        Variant::NoGate,
        Variant::NoNoiseNet,
        Variant::GateProbSpace,
        Variant::OnlyRandomPi,
        Variant::NoiseWithX,
    ];

    pub fn flags(self) -> AblationFlags {
        let full = AblationFlags::full();
        match self {
            Variant::CrossEntropy => AblationFlags::cross_entropy(),
            Variant::PiDual | Variant::OnlyRandomPi => full,
            Variant::NoGate => AblationFlags {
                use_gate: false,
                ..full
            },
            Variant::NoNoiseNet => AblationFlags {
                use_noise_net: false,
                ..full
            },
            Variant::GateProbSpace => AblationFlags {
                gate_space: GateSpace::Probability,
                ..full
            },
            Variant::NoiseWithX => AblationFlags {
                noise_input: NoiseInput::PiAndX,
                ..full
            },
        }
    }

    /// Whether the variant trains on the random identifiers alone.
    pub fn only_random_pi(self) -> bool {
        self == Variant::OnlyRandomPi
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::CrossEntropy => "cross_entropy",
            Variant::PiDual => "pi_dual",
            Variant::NoGate => "no_gate",
            Variant::NoNoiseNet => "no_noise_net",
            Variant::GateProbSpace => "gate_prob_space",
            Variant::OnlyRandomPi => "only_random_pi",
            Variant::NoiseWithX => "noise_with_x",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub x_dim: usize,
    pub pi_dim: usize,
    pub num_classes: usize,
    /// Hidden widths of the prediction network.
    pub prediction_hidden: Vec<usize>,
    /// Width of the noise and gate networks.
    pub pi_width: usize,
    pub shared_first_layer: bool,
    pub ablation: AblationFlags,
}

impl ModelSpec {
    fn pi_input_dim(&self) -> usize {
        match self.ablation.noise_input {
            NoiseInput::PiOnly => self.pi_dim,
            NoiseInput::PiAndX => self.pi_dim + self.x_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 || self.num_classes < 2 || self.pi_width == 0 {
            return Err(Error::config(
                "model",
                "x_dim and pi_width must be >= 1 and num_classes >= 2",
            ));
        }
        if self.prediction_hidden.contains(&0) {
            return Err(Error::config("model.prediction_hidden", "widths must be >= 1"));
        }
        if let Some(c) = self.ablation.fixed_gate {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config("model.fixed_gate", "must lie in [0, 1]"));
            }
        }
        let needs_pi = self.ablation.use_noise_net || self.ablation.learned_gate();
        if needs_pi && self.pi_input_dim() == 0 {
            return Err(Error::config("model", "noise/gate networks need at least one PI column"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiDualModel {
    spec: ModelSpec,
    prediction: Mlp,
    noise_trunk: Mlp,
    noise_head: Mlp,
    /// `None` when the gate shares the noise trunk.
    gate_trunk: Option<Mlp>,
    gate_head: Mlp,
}

/// Per-sub-network gradients of [`PiDualModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub prediction: Gradients,
    pub noise_trunk: Gradients,
    pub noise_head: Gradients,
    pub gate_trunk: Option<Gradients>,
    pub gate_head: Gradients,
}

impl ModelGradients {
    pub fn zeros_like(model: &PiDualModel) -> Self {
        ModelGradients {
            prediction: Gradients::zeros_like(&model.prediction),
            noise_trunk: Gradients::zeros_like(&model.noise_trunk),
            noise_head: Gradients::zeros_like(&model.noise_head),
            gate_trunk: model.gate_trunk.as_ref().map(Gradients::zeros_like),
            gate_head: Gradients::zeros_like(&model.gate_head),
        }
    }

    pub fn groups(&self) -> Vec<(&'static str, &Gradients)> {
        let mut out = vec![
            ("prediction", &self.prediction),
            ("noise_trunk", &self.noise_trunk),
            ("noise_head", &self.noise_head),
        ];
        if let Some(g) = &self.gate_trunk {
            out.push(("gate_trunk", g));
        }
        out.push(("gate_head", &self.gate_head));
        out
    }

    fn groups_mut(&mut self) -> Vec<&mut Gradients> {
        let mut out = vec![&mut self.prediction, &mut self.noise_trunk, &mut self.noise_head];
        if let Some(g) = &mut self.gate_trunk {
            out.push(g);
        }
        out.push(&mut self.gate_head);
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.groups_mut().into_iter().for_each(|g| g.scale(factor));
    }

    pub fn fill_zero(&mut self) {
        self.groups_mut().into_iter().for_each(Gradients::fill_zero);
    }

    pub fn norm(&self) -> f64 {
        self.groups()
            .iter()
            .map(|(_, g)| g.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Everything recorded by [`PiDualModel::forward_train`].
#[derive(Clone, Debug)]
pub struct ModelTape {
    prediction: Tape,
    f: Vec<f64>,
    noise_trunk: Option<Tape>,
    gate_trunk: Option<Tape>,
    noise_head: Option<(Tape, Vec<f64>)>,
    gate_head: Option<Tape>,
    gate: Option<f64>,
    combined: Vec<f64>,
}

impl ModelTape {
    pub fn prediction_logits(&self) -> &[f64] {
        &self.f
    }

    pub fn noise_logits(&self) -> Option<&[f64]> {
        self.noise_head.as_ref().map(|(_, e)| e.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct TrainForward {
    /// Combined logits. In probability space these are the log mixed
    /// probabilities, which act as logits with zero log-normaliser.
    pub combined: Vec<f64>,
    /// Effective gate value, `None` when the gate is ablated.
    pub gate: Option<f64>,
    pub tape: ModelTape,
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl PiDualModel {
    /// Builds a model with He-initialised sub-networks, each from its own
    /// stream derived from `seed`. The prediction network depends only on
    /// `seed` and its own shape, so every variant built from the same seed
    /// starts from the same prediction network.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let k = spec.num_classes;
        let w = spec.pi_width;
        let pi_in = spec.pi_input_dim().max(1);

        let mut sizes = vec![spec.x_dim];
        sizes.extend(&spec.prediction_hidden);
        sizes.push(k);
        let mut acts = vec![Activation::Relu; spec.prediction_hidden.len()];
        acts.push(Activation::Identity);
        let prediction = Mlp::init(
            &sizes,
            &acts,
            &mut seed::rng(seed::derive(seed, stream::PREDICTION_INIT)),
        )?;
        let noise_trunk = Mlp::init(
            &[pi_in, w],
            &[Activation::Relu],
            &mut seed::rng(seed::derive(seed, stream::NOISE_TRUNK_INIT)),
        )?;
        let noise_head = Mlp::init(
            &[w, w, k],
            &[Activation::Relu, Activation::Identity],
            &mut seed::rng(seed::derive(seed, stream::NOISE_HEAD_INIT)),
        )?;
        let gate_trunk = if spec.shared_first_layer {
            None
        } else {
            Some(Mlp::init(
                &[pi_in, w],
                &[Activation::Relu],
                &mut seed::rng(seed::derive(seed, stream::GATE_TRUNK_INIT)),
            )?)
        };
        let gate_head = Mlp::init(
            &[w, w, 1],
            &[Activation::Relu, Activation::Sigmoid],
            &mut seed::rng(seed::derive(seed, stream::GATE_HEAD_INIT)),
        )?;
        Ok(PiDualModel {
            spec,
            prediction,
            noise_trunk,
            noise_head,
            gate_trunk,
            gate_head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn flags(&self) -> AblationFlags {
        self.spec.ablation
    }

    pub fn prediction(&self) -> &Mlp {
        &self.prediction
    }

    pub fn prediction_mut(&mut self) -> &mut Mlp {
        &mut self.prediction
    }

    /// Final gate layer, e.g. to force its bias.
    pub fn gate_head_mut(&mut self) -> &mut Mlp {
        &mut self.gate_head
    }

    /// Every sub-network in a fixed order, for perturbation in tests and
    /// parameter export.
    pub fn subnetworks(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = vec![
            ("prediction", &self.prediction),
            ("noise_trunk", &self.noise_trunk),
            ("noise_head", &self.noise_head),
        ];
        if let Some(g) = &self.gate_trunk {
            out.push(("gate_trunk", g));
        }
        out.push(("gate_head", &self.gate_head));
        out
    }

    pub fn subnetworks_mut(&mut self) -> Vec<(&'static str, &mut Mlp)> {
        let mut out = vec![
            ("prediction", &mut self.prediction),
            ("noise_trunk", &mut self.noise_trunk),
            ("noise_head", &mut self.noise_head),
        ];
        if let Some(g) = &mut self.gate_trunk {
            out.push(("gate_trunk", g));
        }
        out.push(("gate_head", &mut self.gate_head));
        out
    }

    fn check_dims(&self, x: &[f64], a: &[f64]) -> Result<()> {
        if x.len() != self.spec.x_dim {
            return Err(Error::Shape(format!(
                "x has {} entries, model expects {}",
                x.len(),
                self.spec.x_dim
            )));
        }
        if a.len() != self.spec.pi_dim {
            return Err(Error::Shape(format!(
                "pi has {} entries, model expects {}",
                a.len(),
                self.spec.pi_dim
            )));
        }
        Ok(())
    }

    fn pi_input(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        match self.spec.ablation.noise_input {
            NoiseInput::PiOnly if a.is_empty() => vec![0.0],
            NoiseInput::PiOnly => a.to_vec(),
            NoiseInput::PiAndX => a.iter().chain(x).copied().collect(),
        }
    }

    pub fn forward_train(&self, x: &[f64], a: &[f64]) -> Result<TrainForward> {
        self.check_dims(x, a)?;
        let flags = self.spec.ablation;
        let k = self.spec.num_classes;
        let (f, prediction) = self.prediction.forward(x)?;

        let learned_gate = flags.learned_gate();
        let need_trunk = flags.use_noise_net || (learned_gate && self.gate_trunk.is_none());
        let pi_in = if flags.use_noise_net || learned_gate {
            self.pi_input(x, a)
        } else {
            Vec::new()
        };
        let (noise_hidden, noise_trunk) = if need_trunk {
            let (h, t) = self.noise_trunk.forward(&pi_in)?;
            (Some(h), Some(t))
        } else {
            (None, None)
        };
        let noise_head = match (&noise_hidden, flags.use_noise_net) {
            (Some(h), true) => {
                let (eps, t) = self.noise_head.forward(h)?;
                Some((t, eps))
            }
            _ => None,
        };
        let (gate_trunk, gate_head, learned) = if learned_gate {
            let (hidden, gt) = match &self.gate_trunk {
                Some(trunk) => {
                    let (h, t) = trunk.forward(&pi_in)?;
                    (h, Some(t))
                }
                None => (noise_hidden.clone().expect("shared trunk evaluated"), None),
            };
            let (g, t) = self.gate_head.forward(&hidden)?;
            (gt, Some(t), Some(g[0]))
        } else {
            (None, None, None)
        };
        let gate = if flags.use_gate {
            flags.fixed_gate.or(learned)
        } else {
            None
        };

        let eps = noise_head.as_ref().map(|(_, e)| e.as_slice());
        let combined = match gate {
            None => match eps {
                Some(e) => f.iter().zip(e).map(|(a, b)| a + b).collect(),
                None => f.clone(),
            },
            Some(g) => match flags.gate_space {
                GateSpace::Logit => match eps {
                    Some(e) => f
                        .iter()
                        .zip(e)
                        .map(|(fv, ev)| (1.0 - g) * fv + g * ev)
                        .collect(),
                    None => f.iter().map(|fv| (1.0 - g) * fv).collect(),
                },
                GateSpace::Probability => {
                    let zeros = vec![0.0; k];
                    let ls_f = log_softmax(&f);
                    let ls_e = log_softmax(eps.unwrap_or(&zeros));
                    let (lf, le) = ((1.0 - g).ln(), g.ln());
                    ls_f.iter()
                        .zip(&ls_e)
                        .map(|(a, b)| logaddexp(lf + a, le + b))
                        .collect()
                }
            },
        };

        Ok(TrainForward {
            combined: combined.clone(),
            gate,
            tape: ModelTape {
                prediction,
                f,
                noise_trunk,
                gate_trunk,
                noise_head,
                gate_head,
                gate,
                combined,
            },
        })
    }

    /// Loss and gradients of the training objective for one sample.
    pub fn backward_train(&self, tape: &ModelTape, label: usize) -> Result<(f64, ModelGradients)> {
        let mut grads = ModelGradients::zeros_like(self);
        let loss = self.backward_train_into(tape, label, &mut grads)?;
        Ok((loss, grads))
    }

    /// Like [`PiDualModel::backward_train`] but adds into `grads`.
    pub fn backward_train_into(
        &self,
        tape: &ModelTape,
        label: usize,
        grads: &mut ModelGradients,
    ) -> Result<f64> {
        let flags = self.spec.ablation;
        let k = self.spec.num_classes;
        if label >= k {
            return Err(Error::Shape(format!("label {label} out of range for {k} classes")));
        }
        if tape.combined.len() != k {
            return Err(Error::Contract("tape does not belong to this model".into()));
        }
        let f = &tape.f;
        let eps = tape.noise_head.as_ref().map(|(_, e)| e.as_slice());

        let (loss, df, deps, dgate) = match tape.gate {
            None => {
                let (loss, delta) = nn::softmax_ce(&tape.combined, label)?;
                (loss, delta.clone(), eps.map(|_| delta), None)
            }
            Some(g) => match flags.gate_space {
                GateSpace::Logit => {
                    let (loss, delta) = nn::softmax_ce(&tape.combined, label)?;
                    let df: Vec<f64> = delta.iter().map(|d| (1.0 - g) * d).collect();
                    let deps = eps.map(|_| delta.iter().map(|d| g * d).collect::<Vec<_>>());
                    let dg: f64 = match eps {
                        Some(e) => delta.iter().zip(e).zip(f).map(|((d, ev), fv)| d * (ev - fv)).sum(),
                        None => -delta.iter().zip(f).map(|(d, fv)| d * fv).sum::<f64>(),
                    };
                    (loss, df, deps, Some(dg))
                }
                GateSpace::Probability => {
                    let zeros = vec![0.0; k];
                    let ls_f = log_softmax(f);
                    let ls_e = log_softmax(eps.unwrap_or(&zeros));
                    let log_py = tape.combined[label];
                    let r_f = ((1.0 - g).ln() + ls_f[label] - log_py).exp();
                    let r_e = (g.ln() + ls_e[label] - log_py).exp();
                    let mut df: Vec<f64> = ls_f.iter().map(|l| r_f * l.exp()).collect();
                    df[label] -= r_f;
                    let deps = eps.map(|_| {
                        let mut d: Vec<f64> = ls_e.iter().map(|l| r_e * l.exp()).collect();
                        d[label] -= r_e;
                        d
                    });
                    let dg = -((ls_e[label] - log_py).exp() - (ls_f[label] - log_py).exp());
                    (-log_py, df, deps, Some(dg))
                }
            },
        };

        self.prediction
            .backward_into(&tape.prediction, &df, &mut grads.prediction)?;

        let noise_hidden_grad = match (&tape.noise_head, deps) {
            (Some((t, _)), Some(d)) => Some(self.noise_head.backward_into(t, &d, &mut grads.noise_head)?),
            _ => None,
        };
        let gate_hidden_grad = match (&tape.gate_head, dgate, flags.learned_gate()) {
            (Some(t), Some(dg), true) => Some(self.gate_head.backward_into(t, &[dg], &mut grads.gate_head)?),
            _ => None,
        };

        if let Some(trunk) = &self.gate_trunk {
            if let Some(d) = &gate_hidden_grad {
                let t = tape
                    .gate_trunk
                    .as_ref()
                    .ok_or_else(|| Error::Contract("tape does not match gate layout".into()))?;
                let g = grads
                    .gate_trunk
                    .as_mut()
                    .ok_or_else(|| Error::Contract("missing gate trunk gradients".into()))?;
                trunk.backward_into(t, d, g)?;
            }
            if let (Some(t), Some(d)) = (&tape.noise_trunk, &noise_hidden_grad) {
                self.noise_trunk.backward_into(t, d, &mut grads.noise_trunk)?;
            }
        } else {
            let upstream = match (noise_hidden_grad, gate_hidden_grad) {
                (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>()),
                (Some(a), None) | (None, Some(a)) => Some(a),
                (None, None) => None,
            };
            if let (Some(t), Some(d)) = (&tape.noise_trunk, upstream) {
                self.noise_trunk.backward_into(t, &d, &mut grads.noise_trunk)?;
            }
        }
        Ok(loss)
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, x: &[f64], a: &[f64], label: usize) -> Result<f64> {
        let fwd = self.forward_train(x, a)?;
        match (fwd.gate, self.spec.ablation.gate_space) {
            (Some(_), GateSpace::Probability) => Ok(-fwd.combined[label]),
            _ => Ok(nn::softmax_ce(&fwd.combined, label)?.0),
        }
    }

    pub fn prediction_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.prediction.predict(x)
    }

    /// Class probabilities from the prediction network alone.
    pub fn forward_infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.prediction.predict(x)?))
    }

    /// Raw noise-network logits, `None` when the noise network is ablated.
    pub fn noise_logits(&self, x: &[f64], a: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_dims(x, a)?;
        if !self.spec.ablation.use_noise_net {
            return Ok(None);
        }
        let h = self.noise_trunk.predict(&self.pi_input(x, a))?;
        Ok(Some(self.noise_head.predict(&h)?))
    }

    /// Effective gate value, `None` when the gate is ablated.
    pub fn gate_value(&self, x: &[f64], a: &[f64]) -> Result<Option<f64>> {
        self.check_dims(x, a)?;
        let flags = self.spec.ablation;
        if !flags.use_gate {
            return Ok(None);
        }
        if let Some(c) = flags.fixed_gate {
            return Ok(Some(c));
        }
        let input = self.pi_input(x, a);
        let hidden = match &self.gate_trunk {
            Some(t) => t.predict(&input)?,
            None => self.noise_trunk.predict(&input)?,
        };
        Ok(Some(self.gate_head.predict(&hidden)?[0]))
    }
}

/// One optimizer state per sub-network.
#[derive(Clone, Debug)]
pub struct ModelOptimizer {
    states: Vec<OptimizerState>,
    exempt_pi_nets: bool,
}

impl ModelOptimizer {
    pub fn new(model: &PiDualModel, config: OptimizerConfig, exempt_pi_nets: bool) -> Result<Self> {
        let states = model
            .subnetworks()
            .into_iter()
            .map(|(_, m)| OptimizerState::new(m, config.clone()))
            .collect::<Result<_>>()?;
        Ok(ModelOptimizer {
            states,
            exempt_pi_nets,
        })
    }

    /// Steps every sub-network. The noise and gate networks (including a
    /// shared trunk) skip weight decay when `exempt_pi_nets` is set.
    pub fn step(&mut self, model: &mut PiDualModel, grads: &ModelGradients, epoch: usize) -> Result<()> {
        let exempt = self.exempt_pi_nets;
        let flags = model.flags();
        let groups: Vec<&Gradients> = grads.groups().into_iter().map(|(_, g)| g).collect();
        for (((name, net), g), state) in model
            .subnetworks_mut()
            .into_iter()
            .zip(groups)
            .zip(&mut self.states)
        {
            let unused = match name {
                "prediction" => false,
                "noise_head" => !flags.use_noise_net,
                "gate_head" | "gate_trunk" => !flags.learned_gate(),
                _ => !flags.use_noise_net && !flags.learned_gate(),
            };
            if unused {
                continue;
            }
            let decay_exempt = exempt && name != "prediction";
            sgd_step(net, g, state, epoch, decay_exempt)
                .map_err(|e| Error::Numeric(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

/// A trained model plus what is needed to rebuild its PI inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: Option<Variant>,
    pub random_pi: RandomPiSpec,
    pub only_random_pi: bool,
    pub epoch: usize,
    pub model: PiDualModel,
}

pub const CHECKPOINT_FORMAT: &str = "pidual-checkpoint/1";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            row: e.line(),
            message: format!("checkpoint: {e}"),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                row: 1,
                message: format!("unsupported checkpoint format `{}`", ck.format),
            });
        }
        for (name, net) in ck.model.subnetworks() {
            Mlp::new(net.layers().to_vec()).map_err(|e| Error::Parse {
                row: 1,
                message: format!("checkpoint {name}: {e}"),
            })?;
        }
        Ok(ck)
    }

    /// Rebuilds the PI layout the model was trained on.
    pub fn prepare(&self, ds: &crate::data::PiDataset) -> crate::data::PiDataset {
        let aug = crate::data::augment_random_pi(ds, self.random_pi);
        if self.only_random_pi {
            aug.only_random_pi()
        } else {
            aug
        }
    }
}
