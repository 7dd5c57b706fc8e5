//! Ordinal categorical cross-entropy.
//!
//! The plain cross-entropy of the true class is multiplied by
//! `|predicted - true| + 1`, where the prediction is the argmax class (ties
//! toward the lower grade). The multiplier is piecewise constant in the
//! logits, so the gradient is the multiplier times the cross-entropy
//! gradient.

use crate::datamodel::{ConsensusLabel, Grade};
use crate::error::{Error, Result};

use super::{DualHeadOutputs, TrainConfig};

pub fn softmax(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lower(values: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(logits: &[f64; 3]) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("logits"))
    }
}

/// Plain categorical cross-entropy `-ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64; 3], target: Grade) -> Result<f64> {
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target.index()])
}

/// `|argmax + 1 - target| + 1`.
pub fn ordinal_multiplier(logits: &[f64; 3], target: Grade) -> f64 {
    (argmax_lower(logits).abs_diff(target.index()) + 1) as f64
}

pub fn ordinal_ce_loss(logits: &[f64; 3], target: Grade) -> Result<f64> {
    Ok(ordinal_multiplier(logits, target) * cross_entropy(logits, target)?)
}

/// Loss and its gradient with respect to the logits.
pub fn ordinal_ce_loss_grad(logits: &[f64; 3], target: Grade) -> Result<(f64, [f64; 3])> {
    let m = ordinal_multiplier(logits, target);
    let loss = m * cross_entropy(logits, target)?;
    let p = softmax(logits);
    let mut grad = p.map(|v| m * v);
    grad[target.index()] -= m;
    Ok((loss, grad))
}

/// Per-sample training loss and the gradients for both heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub grade_grad: [f64; 3],
    pub agreement_grad: [f64; 3],
}

/// Grade-head loss, plus the weighted agreement-head loss when training on
/// both targets.
pub fn combined_loss_grad(
    outputs: &DualHeadOutputs,
    label: &ConsensusLabel,
    config: &TrainConfig,
) -> Result<LossTerms> {
    let (grade_loss, grade_grad) = ordinal_ce_loss_grad(&outputs.grade_logits, label.consensus)?;
    if !config.dual_target {
        return Ok(LossTerms {
            loss: grade_loss,
            grade_grad,
            agreement_grad: [0.0; 3],
        });
    }
    let (agree_loss, agree_grad) =
        ordinal_ce_loss_grad(&outputs.agreement_logits, label.agreement_class())?;
    let lambda = config.agreement_loss_weight;
    Ok(LossTerms {
        loss: grade_loss + lambda * agree_loss,
        grade_grad,
        agreement_grad: agree_grad.map(|g| lambda * g),
    })
}

pub fn combined_loss(
    outputs: &DualHeadOutputs,
    label: &ConsensusLabel,
    config: &TrainConfig,
) -> Result<f64> {
    Ok(combined_loss_grad(outputs, label, config)?.loss)
}
