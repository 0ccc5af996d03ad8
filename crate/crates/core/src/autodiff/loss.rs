use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One-hot rows for `labels` over `classes` columns.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::usage(format!("label {label} out of range for {classes} classes")));
        }
        data[row * classes + label] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::usage(format!(
            "cross_entropy: logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let targets = one_hot(labels, shape[1])?;
    let targets = g.constant(targets);
    soft_cross_entropy(g, logits, targets)
}

/// Cross-entropy against a (possibly differentiable) target distribution.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: Var) -> Result<Var> {
    let batch = g.shape(logits)[0] as f64;
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, targets)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / batch)
}
