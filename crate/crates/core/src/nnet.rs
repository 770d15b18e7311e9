//! Two-layer fully connected Q network (FC -> ReLU -> FC -> Sigmoid) with an
//! analytic temporal-difference gradient and plain gradient descent.
//!
//! Weights are stored row-major in flat vectors. `w1` is `hidden x input`,
//! `w2` is `actions x hidden` where `actions = M + 1` (the last action is
//! "stay silent").

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnetError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("discount factor {0} outside [0, 1)")]
    InvalidGamma(f64),
    #[error("action index {index} out of range for {actions} actions")]
    ActionOutOfRange { index: usize, actions: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("malformed model record: {0}")]
    Decode(String),
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Parameters of the Q network. Everything that leaves a UE is one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    input_dim: usize,
    hidden: usize,
    actions: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of the TD loss, shape-matched to a [`QNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(net: &QNetwork) -> Self {
        Self {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// All entries in (w1, b1, w2, b2) order.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
    }

    fn scale(&mut self, c: f64) {
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *v *= c;
        }
    }
}

/// One replay entry `(s, a, r~, s')`. `action` is the 0-based index into the
/// action vector and `reward` is already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Activations {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl QNetwork {
    /// Network with every weight and bias set to zero.
    pub fn zeros(input_dim: usize, hidden: usize, channels: usize) -> Self {
        let actions = channels + 1;
        Self {
            input_dim,
            hidden,
            actions,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; actions * hidden],
            b2: vec![0.0; actions],
        }
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(input_dim, hidden, channels);
        let bound1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let bound2 = 1.0 / (hidden.max(1) as f64).sqrt();
        for v in net.w1.iter_mut().chain(net.b1.iter_mut()) {
            *v = rng.gen_range(-bound1..=bound1);
        }
        for v in net.w2.iter_mut().chain(net.b2.iter_mut()) {
            *v = rng.gen_range(-bound2..=bound2);
        }
        net
    }

    /// Builds a network from explicit parameter vectors, validating shapes.
    pub fn from_parts(
        input_dim: usize,
        hidden: usize,
        channels: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self, NnetError> {
        let net = Self {
            input_dim,
            hidden,
            actions: channels + 1,
            w1,
            b1,
            w2,
            b2,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<(), NnetError> {
        let checks = [
            ("w1", self.hidden * self.input_dim, self.w1.len()),
            ("b1", self.hidden, self.b1.len()),
            ("w2", self.actions * self.hidden, self.w2.len()),
            ("b2", self.actions, self.b2.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(NnetError::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Number of selectable channels M (the action vector has M + 1 entries).
    pub fn channels(&self) -> usize {
        self.actions - 1
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    /// `D*L + L + L*(M+1) + (M+1)`.
    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn same_shape(&self, other: &QNetwork) -> bool {
        self.input_dim == other.input_dim
            && self.hidden == other.hidden
            && self.actions == other.actions
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// All parameters in (w1, b1, w2, b2) order.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnetError> {
        if x.len() != self.input_dim {
            return Err(NnetError::DimensionMismatch {
                what: "input",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(NnetError::NonFinite("input"));
        }
        Ok(())
    }

    /// Hidden activation `relu(W1 x + b1)`. Input length is not checked.
    pub fn hidden_activation(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).hidden
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let d = self.input_dim;
        let pre_hidden: Vec<f64> = self
            .b1
            .iter()
            .enumerate()
            .map(|(row, &b)| {
                let w = &self.w1[row * d..(row + 1) * d];
                b + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        let hidden: Vec<f64> = pre_hidden.iter().map(|&z| z.max(0.0)).collect();
        let output = self
            .last_layer(&hidden)
            .into_iter()
            .map(sigmoid)
            .collect();
        Activations {
            pre_hidden,
            hidden,
            output,
        }
    }

    /// Pre-sigmoid action scores `W2 h + b2` for a given hidden activation.
    pub fn last_layer(&self, hidden: &[f64]) -> Vec<f64> {
        affine(&self.w2, &self.b2, hidden)
    }

    /// Action values `sigmoid(W2 relu(W1 x + b1) + b2)`, each in (0, 1).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnetError> {
        self.check_input(x)?;
        Ok(self.activations(x).output)
    }

    /// Applies `theta <- theta - lr * grad`. The model is left untouched when
    /// the gradient or the result would be non-finite.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<(), NnetError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnetError::InvalidLearningRate(lr));
        }
        let shape = Gradients::zeros_like(self);
        for (what, want, got) in [
            ("grad w1", shape.w1.len(), grads.w1.len()),
            ("grad b1", shape.b1.len(), grads.b1.len()),
            ("grad w2", shape.w2.len(), grads.w2.len()),
            ("grad b2", shape.b2.len(), grads.b2.len()),
        ] {
            if want != got {
                return Err(NnetError::DimensionMismatch {
                    what,
                    expected: want,
                    got,
                });
            }
        }
        if !grads.is_finite() {
            return Err(NnetError::NonFinite("gradient"));
        }
        let updated: Vec<f64> = self
            .params()
            .zip(grads.iter())
            .map(|(p, g)| p - lr * g)
            .collect();
        if !updated.iter().all(|v| v.is_finite()) {
            return Err(NnetError::NonFinite("updated parameters"));
        }
        for (p, v) in self.params_mut().zip(updated) {
            *p = v;
        }
        Ok(())
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(row, &bias)| {
            bias + w[row * cols..(row + 1) * cols]
                .iter()
                .zip(x)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

fn max_value(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_batch(
    model: &QNetwork,
    target: &QNetwork,
    batch: &[Experience],
    gamma: f64,
) -> Result<(), NnetError> {
    if batch.is_empty() {
        return Err(NnetError::EmptyBatch);
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(NnetError::InvalidGamma(gamma));
    }
    if !model.same_shape(target) {
        return Err(NnetError::DimensionMismatch {
            what: "target network parameters",
            expected: model.num_params(),
            got: target.num_params(),
        });
    }
    for e in batch {
        model.check_input(&e.state)?;
        model.check_input(&e.next_state)?;
        if e.action >= model.num_actions() {
            return Err(NnetError::ActionOutOfRange {
                index: e.action,
                actions: model.num_actions(),
            });
        }
        if !e.reward.is_finite() {
            return Err(NnetError::NonFinite("reward"));
        }
    }
    Ok(())
}

/// Bootstrapped target `r + gamma * max_a' Q_target(a', s')`.
pub fn td_target(target: &QNetwork, e: &Experience, gamma: f64) -> f64 {
    let next = target.activations(&e.next_state).output;
    e.reward + gamma * max_value(&next)
}

/// Mean squared TD residual over the batch.
pub fn td_loss(
    model: &QNetwork,
    target: &QNetwork,
    batch: &[Experience],
    gamma: f64,
) -> Result<f64, NnetError> {
    check_batch(model, target, batch, gamma)?;
    let total: f64 = batch
        .iter()
        .map(|e| {
            let q = model.activations(&e.state).output[e.action];
            let residual = td_target(target, e, gamma) - q;
            residual * residual
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Batch-mean gradient of [`td_loss`] with respect to the online network.
/// The target network is held constant; the ReLU derivative at 0 is 0.
pub fn td_gradient(
    model: &QNetwork,
    target: &QNetwork,
    batch: &[Experience],
    gamma: f64,
) -> Result<Gradients, NnetError> {
    check_batch(model, target, batch, gamma)?;
    let d = model.input_dim;
    let l = model.hidden;
    let mut grads = Gradients::zeros_like(model);
    for e in batch {
        let act = model.activations(&e.state);
        let q = act.output[e.action];
        let residual = td_target(target, e, gamma) - q;
        // dL/dz_a through the sigmoid
        let g = -2.0 * residual * q * (1.0 - q);
        let row = e.action * l;
        grads.b2[e.action] += g;
        for k in 0..l {
            grads.w2[row + k] += g * act.hidden[k];
            if act.pre_hidden[k] > 0.0 {
                let dh = g * model.w2[row + k];
                grads.b1[k] += dh;
                for (gw, x) in grads.w1[k * d..(k + 1) * d].iter_mut().zip(&e.state) {
                    *gw += dh * x;
                }
            }
        }
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok(grads)
}

/// JSON form of a model record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    d: usize,
    l: usize,
    m: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Size in bytes of the binary header (D, L, M as f64).
pub const BINARY_HEADER_LEN: usize = 3 * 8;

impl QNetwork {
    /// Flat little-endian f64 record: D, L, M, W1 (row-major), b1, W2
    /// (row-major), b2.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = [
            self.input_dim as f64,
            self.hidden as f64,
            self.channels() as f64,
        ];
        let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 8 * self.num_params());
        for v in header.into_iter().chain(self.params()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnetError> {
        if bytes.len() % 8 != 0 || bytes.len() < BINARY_HEADER_LEN {
            return Err(NnetError::Decode(format!(
                "length {} is not a whole number of f64 values with header",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let dim = |v: f64, name: &str| -> Result<usize, NnetError> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(NnetError::Decode(format!("invalid {name} {v}")))
            }
        };
        let (d, l, m) = (
            dim(values[0], "D")?,
            dim(values[1], "L")?,
            dim(values[2], "M")?,
        );
        let sizes = [l * d, l, (m + 1) * l, m + 1];
        let expected: usize = sizes.iter().sum();
        let body = &values[3..];
        if body.len() != expected {
            return Err(NnetError::Decode(format!(
                "expected {expected} parameters, found {}",
                body.len()
            )));
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let part = body[offset..offset + n].to_vec();
            offset += n;
            part
        };
        let (w1, b1, w2, b2) = (take(sizes[0]), take(sizes[1]), take(sizes[2]), take(sizes[3]));
        Self::from_parts(d, l, m, w1, b1, w2, b2)
    }

    pub fn to_json(&self) -> String {
        let record = ModelRecord {
            d: self.input_dim,
            l: self.hidden,
            m: self.channels(),
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
        };
        serde_json::to_string(&record).expect("model record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnetError> {
        let r: ModelRecord =
            serde_json::from_str(text).map_err(|e| NnetError::Decode(e.to_string()))?;
        Self::from_parts(r.d, r.l, r.m, r.w1, r.b1, r.w2, r.b2)
    }
}
