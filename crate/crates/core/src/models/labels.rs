use super::model::Model;
use crate::autodiff::GradientCapture;
use crate::error::{Error, Result};

/// Recovers the label of a single-sample capture from the output layer.
///
/// With cross-entropy on softmax logits, the output weight gradient is
/// `h ⊗ (p − y)`. For non-negative features `h` only the true class column
/// sums to a negative value.
pub fn analytic_label_from_gradient(capture: &GradientCapture, model: &Model) -> Result<usize> {
    capture.check_layout(&model.params().layout())?;
    let name = model.output_weight();
    let entry = capture
        .layout
        .iter()
        .find(|e| e.name == name)
        .expect("layout matched the model");
    let [_, classes] = entry.shape[..] else {
        return Err(Error::LabelRecovery(format!("output weight `{name}` is not a matrix")));
    };
    let block = capture.block_by_name(name).expect("entry exists");
    let mut sums = vec![0.0; classes];
    for row in block.chunks(classes) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let negative: Vec<usize> = (0..classes).filter(|&c| sums[c] < 0.0).collect();
    match negative[..] {
        [c] => Ok(c),
        _ => Err(Error::LabelRecovery(format!(
            "{} output columns have negative gradient sums; expected exactly one",
            negative.len()
        ))),
    }
}
