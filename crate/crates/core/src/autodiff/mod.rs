//! Reverse-mode automatic differentiation over `f64` tensors.

mod graph;
mod loss;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvGeometry, Gradients, Graph, Var};
pub use loss::{cross_entropy, one_hot, soft_cross_entropy};
pub use optim::{Adam, AdamConfig, Lbfgs, LbfgsConfig, LbfgsStep};
pub use params::{GradientCapture, LayoutEntry, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with `floor`
/// guarding coordinates whose magnitude is near zero.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
