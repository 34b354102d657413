use ndarray::{Array4, ArrayView4};

use super::{log_softmax_into, LossGrad};
use crate::error::{BmlError, Result};

/// Point-wise cross-entropy of the global view: the mean over images of the
/// mean over the `h×w` points of `-log softmax(scores)[label]`.
pub fn global_pointwise_loss(scores: ArrayView4<f64>, global_labels: &[usize]) -> Result<f64> {
    global_pointwise_loss_grad(scores, global_labels).map(|g| g.value)
}

/// [`global_pointwise_loss`] together with its gradient with respect to `scores`.
pub fn global_pointwise_loss_grad(scores: ArrayView4<f64>, global_labels: &[usize]) -> Result<LossGrad<Array4<f64>>> {
    let (n, h, w, c) = scores.dim();
    if n != global_labels.len() {
        return Err(BmlError::shape(format!("{n} score maps but {} labels", global_labels.len())));
    }
    if n == 0 || h * w == 0 || c == 0 {
        return Err(BmlError::shape("empty score tensor"));
    }
    if let Some(&label) = global_labels.iter().find(|&&l| l >= c) {
        return Err(BmlError::LabelOutOfRange { label, classes: c });
    }
    let scores = scores.as_standard_layout();
    let flat = scores.as_slice().expect("standard layout");
    let mut grad = vec![0.0; flat.len()];
    let norm = 1.0 / (n * h * w) as f64;
    let mut total = 0.0;
    let mut logp = vec![0.0; c];
    for (i, &label) in global_labels.iter().enumerate() {
        for pt in 0..h * w {
            let off = (i * h * w + pt) * c;
            log_softmax_into(&flat[off..off + c], &mut logp);
            total -= logp[label];
            for k in 0..c {
                grad[off + k] = (logp[k].exp() - if k == label { 1.0 } else { 0.0 }) * norm;
            }
        }
    }
    Ok(LossGrad {
        value: total * norm,
        grad: Array4::from_shape_vec((n, h, w, c), grad).expect("grad shape"),
    })
}
