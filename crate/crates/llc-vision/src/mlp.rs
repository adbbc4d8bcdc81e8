//! Small fully-connected softmax classifier used for the confidence stages.
//!
//! Hidden layers use ReLU, the output layer is a numerically stable softmax,
//! and training minimizes mean cross-entropy with seeded mini-batch gradient
//! descent. The networks here are tiny (inputs are SVM score vectors, not
//! images), so plain dense backprop in f64 is both fast and easy to verify:
//! [`mlp_gradients`] is checked against central finite differences of
//! [`mlp_loss`] in the test suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dense layer: `out_dim x in_dim` weights, row-major, plus biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Layer { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], biases: vec![0.0; out_dim] }
    }

    /// Affine map `W x + b`.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.biases.clone();
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.in_dim)) {
            for (&w, &xv) in row.iter().zip(x) {
                *o += w * xv;
            }
        }
        out
    }
}

/// Feed-forward softmax classifier. `arch` lists layer widths from input to
/// output, so `[50, 100, 50]` is one hidden layer of 100 units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub arch: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl MlpModel {
    /// All-zero parameters: every input maps to the uniform distribution.
    /// Useful as a fixture and as the degenerate "no information" model.
    pub fn zeroed(arch: &[usize]) -> Result<Self> {
        check_arch(arch)?;
        let layers = arch.windows(2).map(|w| Layer::zeroed(w[0], w[1])).collect();
        Ok(MlpModel { arch: arch.to_vec(), layers })
    }

    /// Build from explicit layers, validating shapes.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        let mut arch = vec![layers[0].in_dim];
        for layer in &layers {
            if layer.in_dim == 0
                || layer.out_dim == 0
                || layer.weights.len() != layer.in_dim * layer.out_dim
                || layer.biases.len() != layer.out_dim
                || *arch.last().unwrap() != layer.in_dim
            {
                return Err(Error::InvalidArgument("inconsistent MLP layer shapes".into()));
            }
            arch.push(layer.out_dim);
        }
        Ok(MlpModel { arch, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.last().unwrap()
    }
}

fn check_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "MLP architecture needs >= 2 positive layer widths, got {arch:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        MlpTrainConfig { epochs: 200, learning_rate: 0.01, batch_size: 32, seed: 0 }
    }
}

/// Class probabilities for one input (stable softmax over the final layer).
pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), got: x.len() });
    }
    let (_, probs) = forward_trace(model, x);
    Ok(probs)
}

/// Forward pass keeping every post-activation (input included) for backprop.
/// Returns the activations per layer boundary and the softmax output.
fn forward_trace(model: &MlpModel, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    acts.push(x.to_vec());
    let last = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate() {
        let mut z = layer.affine(acts.last().unwrap());
        if i < last {
            for v in z.iter_mut() {
                *v = v.max(0.0);
            }
        }
        acts.push(z);
    }
    let probs = softmax(acts.last().unwrap());
    (acts, probs)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Mean cross-entropy of `targets` (rows of the simplex, usually one-hot)
/// under the model, computed in log space so it stays finite even for very
/// confident wrong predictions.
pub fn mlp_loss(model: &MlpModel, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_dataset(model, inputs, targets)?;
    let mut total = 0.0f64;
    for (x, y) in inputs.iter().zip(targets) {
        let (acts, _) = forward_trace(model, x);
        total += cross_entropy_from_logits(acts.last().unwrap(), y);
    }
    Ok(total / inputs.len() as f64)
}

fn cross_entropy_from_logits(z: &[f64], y: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    y.iter().zip(z).map(|(&yk, &zk)| yk * (log_sum - zk)).sum()
}

/// Parameter gradients of [`mlp_loss`] over the given batch, one entry per
/// layer, laid out exactly like [`Layer::weights`] / [`Layer::biases`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub fn mlp_gradients(model: &MlpModel, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<LayerGrad>> {
    check_dataset(model, inputs, targets)?;
    let mut grads: Vec<LayerGrad> = model
        .layers
        .iter()
        .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], biases: vec![0.0; l.biases.len()] })
        .collect();
    let inv_n = 1.0 / inputs.len() as f64;

    for (x, y) in inputs.iter().zip(targets) {
        let (acts, probs) = forward_trace(model, x);
        // Softmax + cross-entropy collapses to p - y at the output.
        let mut delta: Vec<f64> = probs.iter().zip(y).map(|(&p, &yk)| (p - yk) * inv_n).collect();
        for (li, layer) in model.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let grad = &mut grads[li];
            for (o, &d) in delta.iter().enumerate() {
                grad.biases[o] += d;
                let row = &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if li > 0 {
                // Push the error through the weights, gated by ReLU.
                let mut prev = vec![0.0f64; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(&acts[li]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    Ok(grads)
}

fn check_dataset(model: &MlpModel, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} inputs for {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    for x in inputs {
        if x.len() != model.input_dim() {
            return Err(Error::DimensionMismatch { expected: model.input_dim(), got: x.len() });
        }
    }
    for y in targets {
        if y.len() != model.output_dim() {
            return Err(Error::DimensionMismatch { expected: model.output_dim(), got: y.len() });
        }
    }
    Ok(())
}

/// Train a softmax MLP with seeded mini-batch gradient descent.
///
/// Weights start from Xavier-uniform initialization drawn from the seeded
/// RNG; sample order is reshuffled every epoch from the same stream.
/// A non-finite epoch loss aborts training with an error rather than
/// returning a poisoned model.
pub fn mlp_train(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    arch: &[usize],
    cfg: &MlpTrainConfig,
) -> Result<MlpModel> {
    check_arch(arch)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("mlp_train needs epochs >= 1 and batch_size >= 1".into()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::zeroed(arch)?;
    for layer in model.layers.iter_mut() {
        let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.random_range(-limit..limit);
        }
    }
    check_dataset(&model, inputs, targets)?;

    let n = inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let by: Vec<Vec<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let grads = mlp_gradients(&model, &bx, &by)?;
            for (layer, grad) in model.layers.iter_mut().zip(&grads) {
                for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
                    *w -= cfg.learning_rate * g;
                }
                for (b, g) in layer.biases.iter_mut().zip(&grad.biases) {
                    *b -= cfg.learning_rate * g;
                }
            }
            epoch_loss += mlp_loss(&model, &bx, &by)? * batch.len() as f64;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
