//! Negative log-likelihood losses for the generation and classification heads.

use super::kernels::log_softmax_into;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Forward pass of the label-smoothed sequence loss, keeping the
/// log-probabilities for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct SmoothedNll {
    pub loss: f64,
    pub log_probs: Vec<f64>,
    pub counted: usize,
}

pub(crate) fn smoothed_nll_forward(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
    epsilon: f64,
    ignore_index: u32,
) -> Result<SmoothedNll> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(Error::Shape(format!(
            "{} logits for {} targets over a vocabulary of {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NumericDomain("logits are not finite".into()));
    }
    let mut log_probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut counted = 0;
    for (t, &target) in targets.iter().enumerate() {
        if target == ignore_index {
            continue;
        }
        if target as usize >= vocab {
            return Err(Error::InvalidArgument(format!(
                "target id {target} at position {t} is outside a vocabulary of {vocab}"
            )));
        }
        let row = t * vocab..(t + 1) * vocab;
        log_softmax_into(&logits[row.clone()], &mut log_probs[row.clone()]);
        let lp = &log_probs[row];
        let mean_lp = lp.iter().sum::<f64>() / vocab as f64;
        total += -((1.0 - epsilon) * lp[target as usize] + epsilon * mean_lp);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "every target position is ignored; the mean loss is undefined".into(),
        ));
    }
    Ok(SmoothedNll {
        loss: total / counted as f64,
        log_probs,
        counted,
    })
}

/// d loss / d logits for [`smoothed_nll_forward`], scaled by `upstream`.
pub(crate) fn smoothed_nll_backward(
    fwd: &SmoothedNll,
    vocab: usize,
    targets: &[u32],
    epsilon: f64,
    ignore_index: u32,
    upstream: f64,
    out: &mut [f64],
) {
    let scale = upstream / fwd.counted as f64;
    let uniform = epsilon / vocab as f64;
    for (t, &target) in targets.iter().enumerate() {
        if target == ignore_index {
            continue;
        }
        let row = t * vocab..(t + 1) * vocab;
        for (v, (o, lp)) in out[row.clone()].iter_mut().zip(&fwd.log_probs[row]).enumerate() {
            let hit = if v == target as usize { 1.0 - epsilon } else { 0.0 };
            *o += scale * (lp.exp() - hit - uniform);
        }
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub(crate) fn class_nll_forward(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || labels.is_empty() || logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} labels over {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NumericDomain("logits are not finite".into()));
    }
    let mut log_probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = b * classes..(b + 1) * classes;
        log_softmax_into(&logits[row.clone()], &mut log_probs[row]);
        total += -log_probs[b * classes + label];
    }
    Ok((total / labels.len() as f64, log_probs))
}

/// Label-smoothed token NLL over `logits` of shape `[T, V]`, averaged over
/// the positions whose target is not `ignore_index`.
pub fn label_smoothed_nll(logits: &Tensor, targets: &[u32], epsilon: f64, ignore_index: u32) -> Result<Tensor> {
    let vocab = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("logits must have a vocabulary axis".into()))?;
    let fwd = smoothed_nll_forward(logits.values(), vocab, targets, epsilon, ignore_index)?;
    Ok(Tensor::scalar(fwd.loss))
}

/// `-log softmax(logits)[label]` for a single logit vector.
pub fn classification_nll(logits: &Tensor, label: usize) -> Result<Tensor> {
    let classes = logits.numel();
    let (loss, _) = class_nll_forward(logits.values(), classes, &[label])?;
    Ok(Tensor::scalar(loss))
}
