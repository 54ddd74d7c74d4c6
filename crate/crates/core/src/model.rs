//! Feed-forward network architectures, forward evaluation and losses.
//!
//! Parameters live in one flat vector. Layer `l` contributes its weight
//! matrix (`n_l x n_{l-1}`, row-major) followed by its bias vector, and
//! layers are laid out in order from input to output.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Batch, Dataset, LabelsRef};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// First derivative. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// Second derivative. ReLU is treated as piecewise linear everywhere.
    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu => 0.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxNll,
    LogisticNll,
}

impl LossKind {
    /// The head this loss is composed with.
    pub fn head(self) -> Head {
        match self {
            LossKind::Mse => Head::Linear,
            LossKind::SoftmaxNll => Head::Softmax,
            LossKind::LogisticNll => Head::Sigmoid,
        }
    }
}

fn default_biases() -> bool {
    true
}

/// Architecture of a fully connected network.
///
/// Serialized as `{"layers": [...], "activation", "head", "loss", "biases"}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(rename = "layers")]
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
    #[serde(rename = "loss")]
    pub loss_kind: LossKind,
    #[serde(default = "default_biases")]
    pub biases: bool,
}

impl NetworkSpec {
    /// Builds and validates a spec whose head is implied by the loss.
    pub fn new(layer_sizes: &[usize], activation: Activation, loss_kind: LossKind) -> Result<Self> {
        let spec = NetworkSpec {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            head: loss_kind.head(),
            loss_kind,
            biases: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn without_biases(mut self) -> Self {
        self.biases = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec("at least an input and an output layer are required".into()));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        if self.head != self.loss_kind.head() {
            return Err(Error::InvalidSpec(format!(
                "head {:?} is incompatible with loss {:?}",
                self.head, self.loss_kind
            )));
        }
        let k = self.output_dim();
        match self.loss_kind {
            LossKind::LogisticNll if k != 1 => {
                Err(Error::InvalidSpec("logistic_nll needs a single output".into()))
            }
            LossKind::SoftmaxNll if k < 2 => {
                Err(Error::InvalidSpec("softmax_nll needs at least two outputs".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Number of classes the labels range over.
    pub fn classes(&self) -> usize {
        match self.loss_kind {
            LossKind::LogisticNll => 2,
            _ => self.output_dim(),
        }
    }

    /// Total number of parameters M.
    pub fn count_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + if self.biases { w[1] } else { 0 })
            .sum()
    }

    /// Offsets and shapes of every layer inside the flat parameter vector.
    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = offset;
                offset += fan_in * fan_out;
                let bias = if self.biases {
                    let b = offset;
                    offset += fan_out;
                    Some(b)
                } else {
                    None
                };
                LayerSlot {
                    fan_in,
                    fan_out,
                    weight,
                    bias,
                }
            })
            .collect()
    }

    /// Stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Position of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl LayerSlot {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.bias.is_some() { self.fan_out } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights<'a>(&self, values: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &values[self.weight..self.weight + self.weight_len()],
        )
        .unwrap()
    }

    pub fn bias<'a>(&self, values: &'a [f64]) -> Option<ArrayView1<'a, f64>> {
        self.bias
            .map(|b| ArrayView1::from(&values[b..b + self.fan_out]))
    }

    /// Whether flat index `j` belongs to this layer, and where.
    pub fn locate(&self, j: usize) -> Option<ParamSite> {
        if j >= self.weight && j < self.weight + self.weight_len() {
            let local = j - self.weight;
            return Some(ParamSite::Weight {
                row: local / self.fan_in,
                col: local % self.fan_in,
            });
        }
        match self.bias {
            Some(b) if j >= b && j < b + self.fan_out => Some(ParamSite::Bias { row: j - b }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSite {
    Weight { row: usize, col: usize },
    Bias { row: usize },
}

pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.count_params()
}

/// Flat weight vector tagged with the fingerprint of the network spec that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    fingerprint: u64,
}

impl ParamVector {
    pub fn new(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        let m = spec.count_params();
        if values.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: values.len(),
                context: "parameter vector length",
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector {
            values,
            fingerprint: spec.fingerprint(),
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.count_params()],
            fingerprint: spec.fingerprint(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.fingerprint != spec.fingerprint() || self.values.len() != spec.count_params() {
            return Err(Error::SpecMismatch);
        }
        Ok(())
    }
}

/// One training target, as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Values(ArrayView1<'a, f64>),
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(z: ArrayView1<f64>) -> f64 {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(z: ArrayView1<f64>, out: &mut [f64]) {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Loss of one example given its pre-head outputs.
pub(crate) fn example_loss(kind: LossKind, logits: ArrayView1<f64>, target: Target) -> f64 {
    match (kind, target) {
        (LossKind::Mse, Target::Class(c)) => {
            0.5 * logits
                .iter()
                .enumerate()
                .map(|(j, &z)| {
                    let d = z - if j == c { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        }
        (LossKind::Mse, Target::Values(y)) => {
            0.5 * logits.iter().zip(y.iter()).map(|(z, y)| (z - y) * (z - y)).sum::<f64>()
        }
        (LossKind::SoftmaxNll, Target::Class(c)) => log_sum_exp(logits) - logits[c],
        (LossKind::SoftmaxNll, Target::Values(y)) => {
            let lse = log_sum_exp(logits);
            y.iter().zip(logits.iter()).map(|(y, z)| y * (lse - z)).sum()
        }
        (LossKind::LogisticNll, Target::Class(c)) => softplus(logits[0]) - c as f64 * logits[0],
        (LossKind::LogisticNll, Target::Values(y)) => softplus(logits[0]) - y[0] * logits[0],
    }
}

/// Gradient and Hessian of the loss with respect to the pre-head outputs.
///
/// `f_out` holds the logits (softmax / sigmoid heads) or the raw outputs
/// (linear head). The returned Hessian is symmetric positive semidefinite:
/// the identity for mse, `diag(p) - p p^T` for softmax, `s(1 - s)` for the
/// logistic loss.
pub fn loss_derivatives(kind: LossKind, f_out: &[f64], y: Target) -> (Vec<f64>, Array2<f64>) {
    let k = f_out.len();
    match kind {
        LossKind::Mse => {
            let grad = f_out
                .iter()
                .enumerate()
                .map(|(j, &z)| z - target_component(y, j))
                .collect();
            (grad, Array2::eye(k))
        }
        LossKind::SoftmaxNll => {
            let mut p = vec![0.0; k];
            softmax_into(ArrayView1::from(f_out), &mut p);
            let grad = (0..k).map(|j| p[j] - target_component(y, j)).collect();
            let hess = Array2::from_shape_fn((k, k), |(a, b)| {
                if a == b {
                    p[a] - p[a] * p[b]
                } else {
                    -p[a] * p[b]
                }
            });
            (grad, hess)
        }
        LossKind::LogisticNll => {
            let s = sigmoid(f_out[0]);
            let target = match y {
                Target::Class(c) => c as f64,
                Target::Values(v) => v[0],
            };
            (vec![s - target], Array2::from_elem((1, 1), s * (1.0 - s)))
        }
    }
}

fn target_component(y: Target, j: usize) -> f64 {
    match y {
        Target::Class(c) => {
            if c == j {
                1.0
            } else {
                0.0
            }
        }
        Target::Values(v) => v[j],
    }
}

/// Pre-head outputs for a batch of inputs (one example per row).
pub(crate) fn logits(spec: &NetworkSpec, values: &[f64], inputs: ArrayView2<f64>) -> Array2<f64> {
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut h: Option<Array2<f64>> = None;
    for (l, slot) in layout.iter().enumerate() {
        let w = slot.weights(values);
        let mut z = match &h {
            Some(prev) => prev.dot(&w.t()),
            None => inputs.dot(&w.t()),
        };
        if let Some(b) = slot.bias(values) {
            z += &b;
        }
        if l < last {
            z.mapv_inplace(|v| spec.activation.apply(v));
        }
        h = Some(z);
    }
    h.unwrap()
}

pub(crate) fn apply_head(head: Head, logits: &mut Array2<f64>) {
    match head {
        Head::Linear => {}
        Head::Sigmoid => logits.mapv_inplace(sigmoid),
        Head::Softmax => {
            let mut p = vec![0.0; logits.ncols()];
            for mut row in logits.rows_mut() {
                softmax_into(row.view(), &mut p);
                row.iter_mut().zip(&p).for_each(|(r, &v)| *r = v);
            }
        }
    }
}

fn check_inputs(spec: &NetworkSpec, params: &ParamVector, inputs: ArrayView2<f64>) -> Result<()> {
    params.check(spec)?;
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            actual: inputs.ncols(),
            context: "input dimension",
        });
    }
    Ok(())
}

/// Network output (after the head) for one input vector.
pub fn forward(spec: &NetworkSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let inputs = ArrayView2::from_shape((1, x.len()), x).unwrap();
    Ok(forward_batch(spec, params, inputs)?.row(0).to_vec())
}

/// Network outputs (after the head), one row per input row.
pub fn forward_batch(
    spec: &NetworkSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_inputs(spec, params, inputs)?;
    let mut out = logits(spec, params.values(), inputs);
    apply_head(spec.head, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output"));
    }
    Ok(out)
}

/// Validates labels against the network spec and the batch size.
pub(crate) fn check_labels(spec: &NetworkSpec, batch: &Batch) -> Result<()> {
    let n = batch.inputs.nrows();
    match batch.labels {
        LabelsRef::Classes(c) => {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: c.len(),
                    context: "label count",
                });
            }
            let classes = spec.classes();
            if let Some(&bad) = c.iter().find(|&&c| c >= classes) {
                return Err(Error::LabelOutOfRange { label: bad, classes });
            }
        }
        LabelsRef::Values(v) => {
            if v.dim() != (n, spec.output_dim()) {
                return Err(Error::DimensionMismatch {
                    expected: spec.output_dim(),
                    actual: v.ncols(),
                    context: "target width",
                });
            }
        }
    }
    Ok(())
}

/// Mean per-example loss over the batch.
pub fn loss(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(spec, params, batch.inputs)?;
    check_labels(spec, batch)?;
    let z = logits(spec, params.values(), batch.inputs);
    let total: f64 = z
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| example_loss(spec.loss_kind, row, batch.target(i)))
        .sum();
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(mean)
}

/// Predicted class for each row of post-head outputs.
pub fn predict_classes(head: Head, outputs: &Array2<f64>) -> Vec<usize> {
    outputs
        .axis_iter(Axis(0))
        .map(|row| {
            if row.len() == 1 && head == Head::Sigmoid {
                return usize::from(row[0] > 0.5);
            }
            // first maximum wins, so ties go to the lowest index
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of examples whose argmax prediction matches the class label.
pub fn accuracy(spec: &NetworkSpec, params: &ParamVector, dataset: &Dataset) -> Result<f64> {
    accuracy_batch(spec, params, &dataset.batch())
}

pub fn accuracy_batch(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = match batch.labels {
        LabelsRef::Classes(c) => c,
        LabelsRef::Values(_) => {
            return Err(Error::InvalidArgument(
                "accuracy needs class labels".into(),
            ))
        }
    };
    let out = forward_batch(spec, params, batch.inputs)?;
    let hits = predict_classes(spec.head, &out)
        .iter()
        .zip(classes)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Copies the parameter block of one layer into owned weight and bias arrays.
pub fn layer_arrays(spec: &NetworkSpec, params: &ParamVector, layer: usize) -> (Array2<f64>, Option<Array1<f64>>) {
    let slot = spec.layout()[layer];
    (
        slot.weights(params.values()).to_owned(),
        slot.bias(params.values()).map(|b| b.to_owned()),
    )
}

/// Reorders the output units of weight layer `layer` (a hidden layer) along
/// with the matching input columns of the next layer. The network function
/// is unchanged.
pub fn permute_hidden_units(
    spec: &NetworkSpec,
    params: &ParamVector,
    layer: usize,
    perm: &[usize],
) -> Result<ParamVector> {
    let layout = spec.layout();
    if layer + 1 >= layout.len() {
        return Err(Error::InvalidArgument("only hidden layers can be permuted".into()));
    }
    let slot = layout[layer];
    if perm.len() != slot.fan_out {
        return Err(Error::DimensionMismatch {
            expected: slot.fan_out,
            actual: perm.len(),
            context: "permutation length",
        });
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    let src = params.values();
    let mut out = src.to_vec();
    for (new, &old) in perm.iter().enumerate() {
        let dst = slot.weight + new * slot.fan_in;
        let from = slot.weight + old * slot.fan_in;
        out[dst..dst + slot.fan_in].copy_from_slice(&src[from..from + slot.fan_in]);
        if let Some(b) = slot.bias {
            out[b + new] = src[b + old];
        }
    }
    let next = layout[layer + 1];
    for r in 0..next.fan_out {
        let row = next.weight + r * next.fan_in;
        for (new, &old) in perm.iter().enumerate() {
            out[row + new] = src[row + old];
        }
    }
    ParamVector::new(spec, out)
}
