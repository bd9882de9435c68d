use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::PAD;

/// Cross-entropy of `scores` against the class `target`:
/// `-log softmax(scores)[target]`.
pub fn ranking_loss(scores: &[f64], target: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidInput(format!("ranking needs at least 2 candidates, got {}", scores.len())));
    }
    if target >= scores.len() {
        return Err(Error::InvalidInput(format!("target {target} out of range for {} candidates", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ranking scores".into()));
    }
    let mut g = Graph::new();
    let s = g.input(Tensor::row_vector(scores.to_vec()));
    let loss = g.softmax_cross_entropy(s, &[Some(target)], 0.0);
    Ok(g.value(loss).data()[0])
}

/// Label-smoothed token cross-entropy, averaged over the steps that have a
/// target: `(1 - eps) * NLL + eps * mean_v(-log p_v)` per step. PAD positions
/// are `None`; [`pad_mask`] builds this from a PAD-filled token sequence.
pub fn lm_loss_smoothed(logits: &Tensor, targets: &[Option<usize>], eps: f64) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    check_smoothing(eps)?;
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidInput(format!("target {bad} outside {} classes", logits.cols())));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    if targets.iter().all(Option::is_none) {
        return Err(Error::InvalidInput("every target is PAD".into()));
    }
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let loss = g.softmax_cross_entropy(l, targets, eps);
    Ok(g.value(loss).data()[0])
}

pub(crate) fn check_smoothing(eps: f64) -> Result<()> {
    if (0.0..1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("smoothing must be in [0, 1), got {eps}")))
    }
}

pub fn pad_mask(targets: &[usize]) -> Vec<Option<usize>> {
    targets.iter().map(|&t| (t != PAD).then_some(t)).collect()
}
