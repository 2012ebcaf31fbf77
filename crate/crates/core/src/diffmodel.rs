//! Small differentiable classifiers with exact per-example losses and
//! gradients.
//!
//! Parameters live in a flat [`ParamVector`] with a fixed canonical layout:
//! layers in order from input to output, and for each layer its weight
//! matrix (row-major, `fan_out` rows of `fan_in` entries) followed by its
//! bias vector. Lookahead and reweighted steps are plain vector arithmetic
//! on this layout, independent of the architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat model parameters in canonical layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    /// Returns `self - eta * direction` without touching `self`.
    pub fn stepped(&self, eta: f64, direction: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), direction.len());
        ParamVector(
            self.0
                .iter()
                .zip(&direction.0)
                .map(|(p, d)| p - eta * d)
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The relu subgradient at exactly zero is 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
}

/// Architecture and loss of a small classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub loss: LossKind,
}

/// One labelled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Example { features, label }
    }
}

/// Anything with per-example losses and gradients over a flat parameter
/// vector. The reweighting machinery is written against this trait.
pub trait Model: Sync {
    fn param_count(&self) -> usize;

    fn per_example_loss(&self, params: &ParamVector, ex: &Example) -> Result<f64>;

    fn per_example_grad(&self, params: &ParamVector, ex: &Example) -> Result<ParamVector>;

    fn loss_and_grad(&self, params: &ParamVector, ex: &Example) -> Result<(f64, ParamVector)> {
        Ok((
            self.per_example_loss(params, ex)?,
            self.per_example_grad(params, ex)?,
        ))
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticRegression,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
            activation,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        match self.kind {
            ModelKind::LogisticRegression if !self.hidden_dims.is_empty() => Err(
                Error::InvalidSpec("logistic regression takes no hidden layers".into()),
            ),
            ModelKind::Mlp if self.hidden_dims.is_empty() => Err(Error::InvalidSpec(
                "mlp needs at least one hidden layer".into(),
            )),
            _ if self.hidden_dims.contains(&0) => Err(Error::InvalidSpec(
                "hidden layer widths must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `[input_dim, hidden..., num_classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let dims = self.layer_dims();
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let slot = LayerSlot {
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Short stable identifier, e.g. `mlp:2-8-3:tanh:ce`.
    pub fn fingerprint(&self) -> String {
        let dims = self
            .layer_dims()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("-");
        match self.kind {
            ModelKind::LogisticRegression => format!("logreg:{dims}:ce"),
            ModelKind::Mlp => {
                let act = match self.activation {
                    Activation::Tanh => "tanh",
                    Activation::Relu => "relu",
                };
                format!("mlp:{dims}:{act}:ce")
            }
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Deterministic in
    /// `(self, seed)`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(self.param_count());
        let values = params.as_mut_slice();
        for slot in self.slots() {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for w in &mut values[slot.weights..slot.bias] {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    fn check(&self, params: &ParamVector, ex: &Example) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        self.check_example(ex)
    }

    pub fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.input_dim,
                got: ex.features.len(),
            });
        }
        if ex.label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: ex.label,
                num_classes: self.num_classes,
            });
        }
        if !ex.features.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("example features".into()));
        }
        Ok(())
    }

    /// Forward pass keeping every layer's pre-activations and outputs.
    /// `outputs[0]` is the input; the last entry of `pre` is the logits.
    fn forward(&self, params: &[f64], features: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let slots = self.slots();
        let mut pre = Vec::with_capacity(slots.len());
        let mut outputs = Vec::with_capacity(slots.len() + 1);
        outputs.push(features.to_vec());
        for (l, slot) in slots.iter().enumerate() {
            let input = &outputs[l];
            let z: Vec<f64> = (0..slot.fan_out)
                .map(|o| {
                    let row = &params[slot.weights + o * slot.fan_in..][..slot.fan_in];
                    let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
                    dot + params[slot.bias + o]
                })
                .collect();
            if l + 1 < slots.len() {
                outputs.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        (pre, outputs)
    }

    pub fn logits(&self, params: &ParamVector, features: &[f64]) -> Vec<f64> {
        let (mut pre, _) = self.forward(params.as_slice(), features);
        pre.pop().unwrap_or_default()
    }

    /// Smallest `|z|` over hidden-layer pre-activations, i.e. the distance
    /// to the nearest relu kink. `None` for models without hidden layers.
    pub fn min_abs_hidden_preactivation(
        &self,
        params: &ParamVector,
        features: &[f64],
    ) -> Option<f64> {
        let (pre, _) = self.forward(params.as_slice(), features);
        pre[..pre.len() - 1]
            .iter()
            .flatten()
            .map(|z| z.abs())
            .reduce(f64::min)
    }

    /// Arg-max class; ties go to the lowest class index.
    pub fn predict(&self, params: &ParamVector, features: &[f64]) -> usize {
        argmax(&self.logits(params, features))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

impl Model for ModelSpec {
    fn param_count(&self) -> usize {
        ModelSpec::param_count(self)
    }

    /// Cross-entropy `-log softmax(logits)[label]`.
    fn per_example_loss(&self, params: &ParamVector, ex: &Example) -> Result<f64> {
        self.check(params, ex)?;
        let logits = self.logits(params, &ex.features);
        Ok(log_sum_exp(&logits) - logits[ex.label])
    }

    fn per_example_grad(&self, params: &ParamVector, ex: &Example) -> Result<ParamVector> {
        Ok(self.loss_and_grad(params, ex)?.1)
    }

    fn loss_and_grad(&self, params: &ParamVector, ex: &Example) -> Result<(f64, ParamVector)> {
        self.check(params, ex)?;
        let p = params.as_slice();
        let slots = self.slots();
        let (pre, outputs) = self.forward(p, &ex.features);
        let logits = pre.last().expect("at least one layer");
        let loss = log_sum_exp(logits) - logits[ex.label];

        let mut grad = ParamVector::zeros(p.len());
        let g = grad.as_mut_slice();
        let mut delta = softmax(logits);
        delta[ex.label] -= 1.0;

        for l in (0..slots.len()).rev() {
            let slot = slots[l];
            let input = &outputs[l];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut g[slot.weights + o * slot.fan_in..][..slot.fan_in];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw = d * x;
                }
                g[slot.bias + o] = *d;
            }
            if l > 0 {
                let z_prev = &pre[l - 1];
                let a_prev = &outputs[l];
                delta = (0..slot.fan_in)
                    .map(|i| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| p[slot.weights + o * slot.fan_in + i] * d)
                            .sum();
                        back * self.activation.derivative(z_prev[i], a_prev[i])
                    })
                    .collect();
            }
        }
        Ok((loss, grad))
    }
}

/// Per-example losses of a batch, in batch order.
pub fn batch_losses<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &[Example],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .map(|ex| model.per_example_loss(params, ex))
        .collect()
}

/// Central-difference gradient estimate of the per-example loss.
pub fn finite_diff_grad<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    ex: &Example,
    step: f64,
) -> Result<ParamVector> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    let mut grad = ParamVector::zeros(params.len());
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = model.per_example_loss(&probe, ex)?;
        probe.as_mut_slice()[i] = orig - step;
        let down = model.per_example_loss(&probe, ex)?;
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}
