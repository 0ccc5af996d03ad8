//! Architectures, the variational bottleneck block, training and checkpoints.

mod checkpoint;
mod labels;
mod model;
mod precode;
mod spec;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use labels::analytic_label_from_gradient;
pub use model::{stack_images, ForwardOptions, ForwardOutput, Mode, Model, NoiseOverride};
pub use precode::{kl_divergence, kl_term, precode_loss, BlockStats};
pub use spec::{Arch, ImageShape, LayerSpec, ModelPreset, ModelSpec, PrecodeSpec};
pub use train::{accuracy, gather, train, LabeledView, TrainConfig, TrainReport};

use crate::autodiff::{GradientCapture, Graph, Tensor};
use crate::error::Result;

/// One forward/backward of the training loss at the current parameters,
/// flattened in definition order. Parameters are left untouched.
pub fn compute_gradient(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    mode: Mode,
    opts: &ForwardOptions,
    include_kl: bool,
) -> Result<GradientCapture> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, true);
    let x = g.constant(images.clone());
    let (loss, _) = model.loss(&mut g, &bound, x, labels, mode, opts, include_kl)?;
    let grads = g.backward(loss)?;
    let mut values = Vec::with_capacity(model.params().numel());
    for v in &bound {
        values.extend_from_slice(grads.get(*v).expect("parameters reach the loss").data());
    }
    Ok(GradientCapture {
        layout: model.params().layout(),
        values,
    })
}

#[cfg(test)]
mod tests;
