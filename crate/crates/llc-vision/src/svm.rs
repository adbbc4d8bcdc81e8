//! One-vs-all linear SVMs trained with Pegasos-style SGD.
//!
//! Each class gets an independent binary classifier minimizing the
//! L2-regularized hinge loss
//!
//! ```text
//! lambda/2 * (||w||^2 + b^2) + 1/n * sum_i max(0, 1 - y_i (w . x_i + b))
//! ```
//!
//! with the class's samples as positives and everything else as negatives.
//! SGD visits one sample at a time in a seeded shuffled order with the
//! classic step size `eta_t = 1 / (lambda * t)`. The bias is treated as the
//! weight on an implicit always-1 input, so the regularizer shrinks it like
//! any other coordinate; with an unregularized bias the huge early steps
//! (`eta_1 = 1/lambda`) kick `b` far from the optimum and it only recovers
//! harmonically. Scores are plain affine functions of the pooled feature,
//! and multi-class prediction takes the argmax (ties to the lowest class
//! index).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::PooledFeature;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        SvmTrainConfig { lambda: 1e-4, epochs: 30, seed: 0 }
    }
}

/// One weight vector and bias per class, over pooled-feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvmModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub lambda: f64,
}

impl LinearSvmModel {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// Train one-vs-all SVMs.
///
/// `labels[i]` is the class of `features[i]` and must lie in
/// `0..num_classes`; every class needs at least one sample. Classes are
/// trained independently, each with its own RNG stream derived from the seed,
/// so adding a class never perturbs the others.
pub fn svm_train(
    features: &[PooledFeature],
    labels: &[usize],
    num_classes: usize,
    cfg: &SvmTrainConfig,
) -> Result<LinearSvmModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("svm_train needs num_classes >= 1".into()));
    }
    if !(cfg.lambda.is_finite() && cfg.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("svm_train needs epochs >= 1".into()));
    }
    let dim = features[0].values.len();
    for f in features {
        if f.values.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.values.len() });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{num_classes}"
        )));
    }
    for class in 0..num_classes {
        if !labels.contains(&class) {
            return Err(Error::EmptyClass { class });
        }
    }

    let n = features.len();
    let mut weights = Vec::with_capacity(num_classes);
    let mut biases = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        // Distinct, reproducible stream per class.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(class as u64 + 1)));
        let mut w = vec![0.0f64; dim];
        let mut b = 0.0f64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0u64;
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (cfg.lambda * t as f64);
                let x = &features[i].values;
                let y = if labels[i] == class { 1.0f64 } else { -1.0 };
                let margin = y * (dot(&w, x) + b);
                // Shrink from the regularizer (bias included, see module
                // docs), then add the hinge subgradient if the margin is
                // violated.
                let shrink = 1.0 - eta * cfg.lambda;
                if shrink != 1.0 {
                    for wv in w.iter_mut() {
                        *wv *= shrink;
                    }
                    b *= shrink;
                }
                if margin < 1.0 {
                    let scale = eta * y;
                    for (wv, &xv) in w.iter_mut().zip(x) {
                        *wv += scale * xv as f64;
                    }
                    b += scale;
                }
            }
        }
        weights.push(w);
        biases.push(b);
    }
    Ok(LinearSvmModel { weights, biases, lambda: cfg.lambda })
}

#[inline]
fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&wv, &xv)| wv * xv as f64).sum()
}

/// Per-class decision values `w_c . f + b_c`.
pub fn svm_score(model: &LinearSvmModel, f: &PooledFeature) -> Result<Vec<f64>> {
    if f.values.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: f.values.len() });
    }
    Ok(model
        .weights
        .iter()
        .zip(&model.biases)
        .map(|(w, &b)| dot(w, &f.values) + b)
        .collect())
}

/// Argmax class; ties resolve to the lowest index.
pub fn svm_predict(model: &LinearSvmModel, f: &PooledFeature) -> Result<usize> {
    Ok(argmax(&svm_score(model, f)?))
}

/// Lowest-index argmax, the tie rule used across the classifier stack.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
