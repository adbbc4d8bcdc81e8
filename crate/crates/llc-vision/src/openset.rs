//! Two-threshold open-set decision routing.
//!
//! Closed-set prediction is the SVM argmax. To reject samples from classes
//! the SVM was never trained on, two confidence MLPs re-read the SVM score
//! vector:
//!
//! 1. `mlp1` estimates how trustworthy the stage-1 argmax is. If its
//!    probability for that class exceeds `t1`, the argmax is accepted.
//! 2. Otherwise `mlp2`, trained with extra unknown classes, gets a say. Its
//!    argmax is taken only when it is an unknown class *and* clears `t2`;
//!    anything else falls back to the stage-1 label.
//!
//! Both comparisons are strict, so `t = 1` disables the respective
//! acceptance entirely and `t1 = 0` accepts every stage-1 decision (softmax
//! probabilities are positive). Thresholds are tuned by exhaustive grid
//! search on a validation split containing unknown-labeled samples.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoding::PooledFeature;
use crate::error::{Error, Result};
use crate::mlp::{mlp_forward, MlpModel};
use crate::svm::{argmax, svm_score, LinearSvmModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetConfig {
    pub t1: f64,
    pub t2: f64,
    /// Output indices of `mlp2` that mean "unknown".
    pub unknown_ids: BTreeSet<usize>,
}

impl Default for OpenSetConfig {
    fn default() -> Self {
        OpenSetConfig { t1: 0.87, t2: 0.93, unknown_ids: BTreeSet::new() }
    }
}

/// Which rule produced the final label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStage {
    /// Stage-1 argmax accepted by `mlp1` confidence.
    SvmArgmax,
    /// `mlp2` asserted an unknown class above `t2`.
    Mlp2Unknown,
    /// Neither rule fired; the stage-1 label is kept.
    Fallback,
}

impl std::fmt::Display for DecisionStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecisionStage::SvmArgmax => "svm_argmax",
            DecisionStage::Mlp2Unknown => "mlp2_unknown",
            DecisionStage::Fallback => "fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationResult {
    pub label: usize,
    /// Confidence of the stage that decided: `mlp1[label]` for accepted and
    /// fallback decisions, `mlp2[label]` for unknown decisions.
    pub confidence: f64,
    pub stage: DecisionStage,
    /// Raw stage-1 SVM scores, for reporting and threshold tuning.
    pub scores: Vec<f64>,
}

fn check_thresholds(cfg: &OpenSetConfig) -> Result<()> {
    for (name, t) in [("t1", cfg.t1), ("t2", cfg.t2)] {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {t}")));
        }
    }
    Ok(())
}

/// Route a stage-1 score vector through the confidence cascade.
///
/// With `mlp2 = None` (a closed-set model) the stage-1 argmax is always
/// returned, tagged [`DecisionStage::SvmArgmax`].
pub fn route_scores(
    scores: &[f64],
    mlp1: &MlpModel,
    mlp2: Option<&MlpModel>,
    cfg: &OpenSetConfig,
) -> Result<ClassificationResult> {
    check_thresholds(cfg)?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot route an empty score vector".into()));
    }
    if mlp1.input_dim() != scores.len() {
        return Err(Error::DimensionMismatch { expected: mlp1.input_dim(), got: scores.len() });
    }

    let stage1 = argmax(scores);
    let p1 = mlp_forward(mlp1, scores)?;
    if stage1 >= p1.len() {
        return Err(Error::Internal(format!(
            "mlp1 emits {} classes but stage-1 picked {stage1}",
            p1.len()
        )));
    }
    let c1 = p1[stage1];

    let result = |label, confidence, stage| ClassificationResult { label, confidence, stage, scores: scores.to_vec() };

    let Some(mlp2) = mlp2 else {
        return Ok(result(stage1, c1, DecisionStage::SvmArgmax));
    };
    if let Some(&bad) = cfg.unknown_ids.iter().find(|&&i| i >= mlp2.output_dim()) {
        return Err(Error::InvalidArgument(format!(
            "unknown id {bad} outside mlp2's {} outputs",
            mlp2.output_dim()
        )));
    }

    if c1 > cfg.t1 {
        return Ok(result(stage1, c1, DecisionStage::SvmArgmax));
    }

    let p2 = mlp_forward(mlp2, scores)?;
    let stage2 = argmax(&p2);
    let c2 = p2[stage2];
    if c2 > cfg.t2 && cfg.unknown_ids.contains(&stage2) {
        return Ok(result(stage2, c2, DecisionStage::Mlp2Unknown));
    }
    Ok(result(stage1, c1, DecisionStage::Fallback))
}

/// Score a pooled feature with the SVM bank and route the result.
pub fn classify(
    svm: &LinearSvmModel,
    mlp1: &MlpModel,
    mlp2: Option<&MlpModel>,
    cfg: &OpenSetConfig,
    feature: &PooledFeature,
) -> Result<ClassificationResult> {
    let scores = svm_score(svm, feature)?;
    route_scores(&scores, mlp1, mlp2, cfg)
}

/// Exhaustive grid search for `(t1, t2)`.
///
/// `samples` pairs stage-1 score vectors with true labels in the combined
/// known+unknown id space. Every `(t1, t2)` on the grid
/// `{0, step, 2*step, ..., 1}^2` is evaluated by routing all samples;
/// the pair with the highest accuracy wins, and exact ties prefer the larger
/// `t1`, then the larger `t2` (reject more aggressively when it costs
/// nothing). The validation set must contain at least one unknown-labeled
/// sample, otherwise tuning would degenerate to never rejecting.
pub fn tune_thresholds(
    samples: &[(Vec<f64>, usize)],
    mlp1: &MlpModel,
    mlp2: &MlpModel,
    unknown_ids: &BTreeSet<usize>,
    grid_step: f64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("tune_thresholds needs validation samples".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::InvalidArgument(format!("grid_step must lie in (0, 1], got {grid_step}")));
    }
    if !samples.iter().any(|(_, label)| unknown_ids.contains(label)) {
        return Err(Error::NoUnknownValidation);
    }

    // Per-sample routing ingredients are threshold-independent; precompute.
    struct Routed {
        label: usize,
        stage1: usize,
        c1: f64,
        stage2: usize,
        c2: f64,
        stage2_unknown: bool,
    }
    let mut routed = Vec::with_capacity(samples.len());
    for (scores, label) in samples {
        let probe = OpenSetConfig { t1: 0.0, t2: 0.0, unknown_ids: unknown_ids.clone() };
        // Validate dimensions once through the real router.
        route_scores(scores, mlp1, Some(mlp2), &probe)?;
        let stage1 = argmax(scores);
        let c1 = mlp_forward(mlp1, scores)?[stage1];
        let p2 = mlp_forward(mlp2, scores)?;
        let stage2 = argmax(&p2);
        routed.push(Routed {
            label: *label,
            stage1,
            c1,
            stage2,
            c2: p2[stage2],
            stage2_unknown: unknown_ids.contains(&stage2),
        });
    }

    let mut grid: Vec<f64> = Vec::new();
    let mut k = 0u32;
    loop {
        let t = k as f64 * grid_step;
        if t >= 1.0 {
            break;
        }
        grid.push(t);
        k += 1;
    }
    grid.push(1.0);

    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for &t1 in &grid {
        for &t2 in &grid {
            let correct = routed
                .iter()
                .filter(|r| {
                    let predicted = if r.c1 > t1 {
                        r.stage1
                    } else if r.c2 > t2 && r.stage2_unknown {
                        r.stage2
                    } else {
                        r.stage1
                    };
                    predicted == r.label
                })
                .count();
            let acc = correct as f64 / routed.len() as f64;
            if acc >= best.0 {
                best = (acc, t1, t2);
            }
        }
    }
    Ok((best.1, best.2))
}

// ---------------------------------------------------------------------------
