//! Cross-entropy and the imbalance-aware losses, with exact gradients with
//! respect to the logits.
//!
//! Class weights and counts are indexed by class index (-1, 0, +1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Floor applied to the true-class probability inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor applied to class accuracies before inversion.
pub const ACCURACY_FLOOR: f64 = 0.01;

/// Which loss to train with, and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossSpec {
    Plain,
    /// Fixed per-class weights.
    Weighted { class_weights: [f64; NUM_CLASSES] },
    /// Count-derived coefficients times `(1 - p_y)^2` times cross-entropy.
    /// Counts come from the training split when not given.
    Sensitive { class_counts: Option<[u64; NUM_CLASSES]> },
    Focal { lambda: f64 },
    /// Weights recomputed from per-class validation accuracy after each
    /// epoch, starting from `accuracies`.
    Adaptive { accuracies: [f64; NUM_CLASSES] },
}

/// Loss kinds without parameters, for CLI and config selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Plain,
    Weighted,
    Sensitive,
    Focal,
    Adaptive,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Plain,
        LossKind::Weighted,
        LossKind::Sensitive,
        LossKind::Focal,
        LossKind::Adaptive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Plain => "plain",
            LossKind::Weighted => "weighted",
            LossKind::Sensitive => "sensitive",
            LossKind::Focal => "focal",
            LossKind::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

impl LossSpec {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::Plain => LossKind::Plain,
            LossSpec::Weighted { .. } => LossKind::Weighted,
            LossSpec::Sensitive { .. } => LossKind::Sensitive,
            LossSpec::Focal { .. } => LossKind::Focal,
            LossSpec::Adaptive { .. } => LossKind::Adaptive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |w: &[f64]| w.iter().all(|x| x.is_finite() && *x > 0.0);
        match self {
            LossSpec::Plain => Ok(()),
            LossSpec::Weighted { class_weights } if positive(class_weights) => Ok(()),
            LossSpec::Weighted { class_weights } => {
                Err(Error::Config(format!("class weights must be finite and positive: {class_weights:?}")))
            }
            LossSpec::Sensitive { class_counts: Some(c) } if c.iter().sum::<u64>() == 0 => {
                Err(Error::Config("sensitive loss needs a non-empty class count".into()))
            }
            LossSpec::Sensitive { .. } => Ok(()),
            LossSpec::Focal { lambda } if lambda.is_finite() && *lambda >= 0.0 => Ok(()),
            LossSpec::Focal { lambda } => Err(Error::Config(format!("focal lambda must be >= 0, got {lambda}"))),
            LossSpec::Adaptive { accuracies } if accuracies.iter().all(|a| a.is_finite() && *a > 0.0 && *a <= 1.0) => Ok(()),
            LossSpec::Adaptive { accuracies } => {
                Err(Error::Config(format!("accuracies must lie in (0, 1]: {accuracies:?}")))
            }
        }
    }

    /// The per-sample loss to use, given training-set class counts (used by
    /// the sensitive loss when no counts are configured).
    pub fn resolve(&self, train_counts: [u64; NUM_CLASSES]) -> LossFn {
        match self {
            LossSpec::Plain => LossFn::CrossEntropy,
            LossSpec::Weighted { class_weights } => LossFn::Weighted(*class_weights),
            LossSpec::Sensitive { class_counts } => {
                LossFn::Sensitive(sensitive_coefficients(&class_counts.unwrap_or(train_counts)))
            }
            LossSpec::Focal { lambda } => LossFn::Focal(*lambda),
            LossSpec::Adaptive { accuracies } => LossFn::Weighted(adaptive_weights(accuracies)),
        }
    }
}

/// A fully resolved per-sample loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossFn {
    CrossEntropy,
    Weighted([f64; NUM_CLASSES]),
    /// Count coefficients `N_{-c} / ((C - 1) N)`.
    Sensitive([f64; NUM_CLASSES]),
    Focal(f64),
}

impl LossFn {
    /// Loss of one sample; writes `dL/dlogits` into `grad`.
    pub fn loss_and_grad(&self, logits: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let p = softmax_probs(logits);
        match *self {
            LossFn::CrossEntropy => {
                ce_grad(&p, y, 1.0, grad);
                cross_entropy(&p, y)
            }
            LossFn::Weighted(w) => {
                ce_grad(&p, y, w[y], grad);
                w[y] * cross_entropy(&p, y)
            }
            LossFn::Sensitive(coef) => coef[y] * focal_loss_and_grad(&p, y, 2.0, coef[y], grad),
            LossFn::Focal(lambda) => focal_loss_and_grad(&p, y, lambda, 1.0, grad),
        }
    }

    pub fn loss(&self, logits: &[f64], y: usize) -> f64 {
        let mut g = vec![0.0; logits.len()];
        self.loss_and_grad(logits, y, &mut g)
    }
}

/// Softmax with max subtraction.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// `1 - p_y` computed from the other classes to avoid cancellation.
fn complement(p: &[f64], y: usize) -> f64 {
    p.iter().enumerate().filter(|(k, _)| *k != y).map(|(_, v)| v).sum()
}

pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -p[y].max(PROB_FLOOR).ln()
}

fn ce_grad(p: &[f64], y: usize, scale: f64, grad: &mut [f64]) {
    for (k, g) in grad.iter_mut().enumerate() {
        *g = scale * (p[k] - if k == y { 1.0 } else { 0.0 });
    }
}

pub fn weighted_loss(p: &[f64], y: usize, w: &[f64]) -> f64 {
    w[y] * cross_entropy(p, y)
}

/// `N_{-c} / ((C - 1) N)` for each class. Sums to 1.
pub fn sensitive_coefficients(counts: &[u64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let n: u64 = counts.iter().sum();
    let denom = (NUM_CLASSES as f64 - 1.0) * n as f64;
    counts.map(|c| (n - c) as f64 / denom)
}

pub fn sensitive_loss(p: &[f64], y: usize, counts: &[u64; NUM_CLASSES]) -> f64 {
    let coef = sensitive_coefficients(counts);
    coef[y] * complement(p, y).powi(2) * cross_entropy(p, y)
}

pub fn focal_loss(p: &[f64], y: usize, lambda: f64) -> f64 {
    let one_minus = complement(p, y);
    let focus = if lambda == 0.0 { 1.0 } else { one_minus.powf(lambda) };
    focus * cross_entropy(p, y)
}

/// Focal loss value (unscaled) and `scale * dL/dlogits`.
fn focal_loss_and_grad(p: &[f64], y: usize, lambda: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let q = p[y].max(PROB_FLOOR);
    let one_minus = complement(p, y);
    let log_q = q.ln();
    let focus = if lambda == 0.0 { 1.0 } else { one_minus.powf(lambda) };
    // dL/dq
    let mut dq = -focus / q;
    if lambda != 0.0 && one_minus > 0.0 {
        dq += lambda * one_minus.powf(lambda - 1.0) * log_q;
    }
    for (k, g) in grad.iter_mut().enumerate() {
        let dqdz = p[y] * (if k == y { 1.0 } else { 0.0 } - p[k]);
        *g = scale * dq * dqdz;
    }
    -focus * log_q
}

/// Inverse-accuracy weights normalized to sum to 1.
pub fn adaptive_weights(accuracies: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let inv = accuracies.map(|a| 1.0 / a.max(ACCURACY_FLOOR));
    let s: f64 = inv.iter().sum();
    inv.map(|x| x / s)
}

/// Mean loss over a batch of `(logits, class)` pairs.
pub fn batch_loss(loss: &LossFn, batch: &[(Vec<f64>, usize)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|(z, y)| loss.loss(z, *y)).sum::<f64>() / batch.len() as f64
}
