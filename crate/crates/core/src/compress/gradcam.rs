use super::GradcamLayer;
use crate::error::{Error, Result};
use crate::model::{Model, StepTrace};
use crate::tensor::Tensor;
use crate::tokenizer::tokenize;

/// Per-encoder-token relevance of one traced layer:
/// `relu(sum_{h,i} A[h,i,j] * dL/dA[h,i,j])`.
pub fn layer_scores(map: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
    let shape = map.shape();
    if shape.len() != 3 || grad.shape() != shape {
        return Err(Error::Shape(format!("Grad-CAM map {:?} and gradient {:?}", shape, grad.shape())));
    }
    let (h, rows, cols) = (shape[0], shape[1], shape[2]);
    let mut total = vec![0.0; cols];
    for r in 0..h * rows {
        let a = &map.data()[r * cols..(r + 1) * cols];
        let d = &grad.data()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            total[j] += a[j] * d[j];
        }
    }
    Ok(total.into_iter().map(|t| t.max(0.0)).collect())
}

/// Mean of the per-step layer scores.
pub fn gradcam_from_trace(steps: &[StepTrace], layer: usize) -> Result<Vec<f64>> {
    let first = steps.first().ok_or_else(|| Error::InvalidInput("no generation steps traced".into()))?;
    let cols = first.layers.get(layer).ok_or_else(|| Error::InvalidInput(format!("no traced layer {layer}")))?.map.shape()[2];
    let mut total = vec![0.0; cols];
    for step in steps {
        let t = &step.layers[layer];
        for (acc, s) in total.iter_mut().zip(layer_scores(&t.map, &t.grad)?) {
            *acc += s;
        }
    }
    let n = steps.len() as f64;
    Ok(total.into_iter().map(|s| s / n).collect())
}

/// Token-level Grad-CAM over the encoded document for a greedy answer of up
/// to `steps` tokens.
pub fn gradcam_token_scores(
    model: &Model,
    instruction: &str,
    document: &str,
    steps: usize,
    layer: GradcamLayer,
) -> Result<Vec<f64>> {
    let layer = layer.resolve(model.config().dec_layers)?;
    let enc = model.encode(&tokenize(document))?;
    let (_, trace) = model.forward_with_trace(&tokenize(instruction), &enc, steps)?;
    gradcam_from_trace(&trace, layer)
}
