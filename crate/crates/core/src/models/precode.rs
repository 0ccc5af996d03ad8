use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Graph handles for one bottleneck's posterior parameters, each `[N, k]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockStats {
    pub mu: Var,
    pub sigma: Var,
    pub beta: f64,
}

/// Per-sample KL of `N(mu, sigma^2)` from `N(0, 1)`, averaged over the batch.
pub fn kl_term(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var> {
    if g.value(sigma).data().contains(&0.0) {
        return Err(Error::NonFinite { op: "kl_divergence" });
    }
    let batch = g.shape(mu).first().copied().unwrap_or(1);
    let mu2 = g.mul(mu, mu)?;
    let var = g.mul(sigma, sigma)?;
    let log_var = g.log(var)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.affine(t, 1.0, -1.0)?;
    let total = g.sum(t)?;
    g.scale(total, 0.5 / batch as f64)
}

/// `task + Σ β_i · KL_i` over every bottleneck in `blocks`.
pub fn precode_loss(g: &mut Graph, task: Var, blocks: &[BlockStats]) -> Result<Var> {
    let mut loss = task;
    for b in blocks {
        let kl = kl_term(g, b.mu, b.sigma)?;
        let weighted = g.scale(kl, b.beta)?;
        loss = g.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Closed-form KL for one diagonal Gaussian; the value-level reference.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            shapes: vec![vec![mu.len()], vec![sigma.len()]],
        });
    }
    if sigma.contains(&0.0) {
        return Err(Error::NonFinite { op: "kl_divergence" });
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
            .sum::<f64>())
}
