//! The fully-connected classifier: leaky-ReLU hidden layers, softmax output,
//! mean cross-entropy loss and hand-written backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, RandomStream};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;

/// Layer widths from input to output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture(pub Vec<usize>);

impl Default for Architecture {
    fn default() -> Self {
        Architecture(vec![784, 300, 150, 10])
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.0.len() < 2 || self.0.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "architecture needs at least two non-zero widths, got {:?}",
                self.0
            )));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.0[0]
    }

    pub fn outputs(&self) -> usize {
        *self.0.last().unwrap()
    }

    /// `(out, in)` weight shapes, one per layer.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.0.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Per-layer weights and biases.
///
/// The same container carries anything shaped like the parameters: gradients,
/// optimizer steps, importance values and anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// `∂L/∂θ`, shaped like the parameters.
pub type Gradients = MlpParams;

impl MlpParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .weight_shapes()
            .into_iter()
            .map(|(out, inp)| Layer {
                weights: Matrix::zeros(out, inp),
                biases: vec![0.0; out],
            })
            .collect();
        Self { layers }
    }

    /// He-uniform weights, `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`, and
    /// zero biases.
    pub fn init(arch: &Architecture, stream: &mut RandomStream) -> Result<Self> {
        arch.validate()?;
        let mut params = Self::zeros(arch);
        for layer in &mut params.layers {
            let bound = (6.0 / layer.weights.cols() as f64).sqrt();
            for w in layer.weights.as_mut_slice() {
                *w = stream.next_uniform(-bound, bound)?;
            }
        }
        Ok(params)
    }

    pub fn architecture(&self) -> Architecture {
        let mut sizes = vec![self.layers[0].weights.cols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.rows()));
        Architecture(sizes)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape() && a.biases.len() == b.biases.len())
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            return Ok(());
        }
        let idx = self
            .layers
            .iter()
            .zip(&other.layers)
            .position(|(a, b)| a.weights.shape() != b.weights.shape() || a.biases.len() != b.biases.len());
        let (left, right) = match idx {
            Some(i) => (self.layers[i].weights.shape(), other.layers[i].weights.shape()),
            None => ((self.layers.len(), 0), (other.layers.len(), 0)),
        };
        Err(Error::ShapeMismatch { op, left, right })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    /// All values in a fixed order: layer by layer, weights row-major then
    /// biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.biases))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.values_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Elementwise combination of two congruent containers.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        let mut out = self.clone();
        for (o, b) in out.values_mut().zip(other.values()) {
            *o = f(*o, *b);
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Everything backpropagation needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch; `activations[l + 1]` is the output
    /// of layer `l`. The last entry holds the softmax probabilities.
    pub activations: Vec<Matrix>,
    /// Pre-activations `z = a·Wᵀ + b` per layer; the last entry is the logits.
    pub pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn probabilities(&self) -> &Matrix {
        self.activations.last().unwrap()
    }

    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

fn leaky_relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn forward(params: &MlpParams, batch: &Matrix) -> Result<ForwardTrace> {
    let inputs = params.layers[0].weights.cols();
    if batch.cols() != inputs {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: batch.shape(),
            right: params.layers[0].weights.shape(),
        });
    }
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    activations.push(batch.clone());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = numerics::matmul_transb(activations.last().unwrap(), &layer.weights)
            .map_err(|_| Error::NonFiniteActivation { layer: l })?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.biases) {
                *v += b;
            }
        }
        let a = if l == last {
            softmax_rows(&z)
        } else {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = leaky_relu(*v));
            a
        };
        if !z.as_slice().iter().chain(a.as_slice()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        pre_activations.push(z);
        activations.push(a);
    }
    Ok(ForwardTrace {
        activations,
        pre_activations,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::CountMismatch {
            images: rows,
            labels: labels.len(),
        });
    }
    match labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        Some((index, &label)) => Err(Error::LabelOutOfRange {
            index,
            label,
            classes,
        }),
        None => Ok(()),
    }
}

/// `-log p(y | x)` per row, via log-sum-exp over the logits.
pub fn per_sample_nll(trace: &ForwardTrace, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = trace.logits();
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - (row[y] - max)
        })
        .collect())
}

/// Summed negative log-likelihood over the batch.
pub fn cross_entropy_sum(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    Ok(per_sample_nll(trace, labels)?.iter().sum())
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset("cross_entropy"));
    }
    Ok(cross_entropy_sum(trace, labels)? / n as f64)
}

fn check_trace(params: &MlpParams, trace: &ForwardTrace) -> Result<()> {
    if trace.pre_activations.len() != params.layers.len()
        || trace
            .pre_activations
            .iter()
            .zip(&params.layers)
            .any(|(z, layer)| z.cols() != layer.weights.rows())
    {
        return Err(Error::ShapeMismatch {
            op: "backward",
            left: (trace.pre_activations.len(), trace.logits().cols()),
            right: (params.layers.len(), params.layers.last().unwrap().weights.rows()),
        });
    }
    Ok(())
}

/// Per-sample pre-activation gradients `∂ℓ_s/∂z_l` for every layer, where
/// `ℓ_s = −log p(y_s | x_s)`. Rows never mix, so row `s` of each matrix is
/// exactly what a batch-of-one backward pass on sample `s` would produce.
pub fn backward_deltas(params: &MlpParams, trace: &ForwardTrace, labels: &[usize]) -> Result<Vec<Matrix>> {
    check_trace(params, trace)?;
    let probs = trace.probabilities();
    check_labels(labels, probs.rows(), probs.cols())?;

    // softmax + cross-entropy: p − onehot(y)
    let mut dz = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        dz.row_mut(r)[y] -= 1.0;
    }
    let mut deltas = Vec::with_capacity(params.layers.len());
    for l in (1..params.layers.len()).rev() {
        let mut da = numerics::matmul(&dz, &params.layers[l].weights)?;
        for (d, z) in da
            .as_mut_slice()
            .iter_mut()
            .zip(trace.pre_activations[l - 1].as_slice())
        {
            *d *= leaky_relu_grad(*z);
        }
        deltas.push(std::mem::replace(&mut dz, da));
    }
    deltas.push(dz);
    deltas.reverse();
    Ok(deltas)
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
    let batch = trace.batch_size();
    if batch == 0 {
        return Err(Error::EmptyDataset("backward"));
    }
    let deltas = backward_deltas(params, trace, labels)?;
    let inv_b = 1.0 / batch as f64;
    let mut layers = Vec::with_capacity(deltas.len());
    for (l, dz) in deltas.iter().enumerate() {
        let mut weights = numerics::matmul_transa(dz, &trace.activations[l])?;
        weights.as_mut_slice().iter_mut().for_each(|v| *v *= inv_b);
        let mut biases = vec![0.0; dz.cols()];
        for row in dz.row_iter() {
            numerics::axpy(1.0, row, &mut biases);
        }
        biases.iter_mut().for_each(|v| *v *= inv_b);
        layers.push(Layer { weights, biases });
    }
    Ok(MlpParams { layers })
}

/// Mean loss and its gradient for one batch.
pub fn loss_and_gradient(params: &MlpParams, batch: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
    let trace = forward(params, batch)?;
    let loss = cross_entropy(&trace, labels)?;
    Ok((loss, backward(params, &trace, labels)?))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &MlpParams, images: &Matrix) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.rows());
    let mut start = 0;
    while start < images.rows() {
        let end = (start + EVAL_CHUNK).min(images.rows());
        let chunk = images.select_rows(&(start..end).collect::<Vec<_>>());
        let trace = forward(params, &chunk)?;
        out.extend(trace.logits().row_iter().map(argmax));
        start = end;
    }
    Ok(out)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(params: &MlpParams, images: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("accuracy"));
    }
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    let predictions = predict(params, images)?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}
