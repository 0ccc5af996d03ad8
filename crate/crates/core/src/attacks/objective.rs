use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, one_hot, soft_cross_entropy, GradientCapture, Graph, Var};
use crate::error::{Error, Result};
use crate::models::{ForwardOptions, Mode, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Squared Euclidean gradient distance.
    Euclidean,
    /// Euclidean distance plus `alpha·‖softmax(F(x')) − onehot(y)‖²`.
    EuclideanLabelMatch,
    /// `1 − cos(∇victim, ∇dummy) + alpha·TV(x')`.
    CosineTv,
}

/// Which gradient vectors the cosine distance compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineScope {
    /// One cosine over the concatenation of every parameter gradient.
    #[default]
    Whole,
    /// Mean of per-parameter cosines.
    PerLayerMean,
}

/// Dummy labels: fixed class indices or trainable logits (softmax-normalized).
#[derive(Debug, Clone, Copy)]
pub enum DummyLabels<'a> {
    Fixed(&'a [usize]),
    Logits(Var),
}

/// Anisotropic total variation of `x: [N, C, H, W]`, summed over everything.
pub fn total_variation(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
        return Err(Error::usage(format!(
            "total variation needs [N, C, H, W] with H, W >= 2, got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    let up = g.slice_axis(x, 2, 0, h - 1)?;
    let down = g.slice_axis(x, 2, 1, h - 1)?;
    let dv = g.abs_diff(down, up)?;
    let left = g.slice_axis(x, 3, 0, w - 1)?;
    let right = g.slice_axis(x, 3, 1, w - 1)?;
    let dh = g.abs_diff(right, left)?;
    let sv = g.sum(dv)?;
    let sh = g.sum(dh)?;
    g.add(sv, sh)
}

/// Objective settings shared by every evaluation of one attack.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub alpha: f64,
    pub scope: CosineScope,
    /// Include bottleneck KL terms in the dummy training loss.
    pub include_kl: bool,
}

/// Builds the attack objective for dummy input `x` on `g`. The model's
/// parameters are bound as fresh leaves so the dummy gradient can itself be
/// differentiated with respect to `x`.
pub fn build_objective(
    g: &mut Graph,
    model: &mut Model,
    capture: &GradientCapture,
    x: Var,
    labels: DummyLabels<'_>,
    spec: &ObjectiveSpec,
    opts: &ForwardOptions,
) -> Result<Var> {
    capture.check_layout(&model.params().layout())?;
    let params = model.params().bind(g, true);
    let out = model.forward(g, &params, x, Mode::Attack, opts)?;
    let classes = g.shape(out.logits)[1];
    let batch = g.shape(out.logits)[0];
    let mut loss = match labels {
        DummyLabels::Fixed(y) => cross_entropy(g, out.logits, y)?,
        DummyLabels::Logits(l) => {
            let target = g.softmax(l)?;
            soft_cross_entropy(g, out.logits, target)?
        }
    };
    if spec.include_kl && !out.blocks.is_empty() {
        loss = crate::models::precode_loss(g, loss, &out.blocks)?;
    }
    let dummy = g.grad(loss, &params, true)?;

    let mut objective = match spec.kind {
        ObjectiveKind::Euclidean | ObjectiveKind::EuclideanLabelMatch => euclidean(g, capture, &dummy)?,
        ObjectiveKind::CosineTv => match spec.scope {
            CosineScope::Whole => {
                let flat = dummy.iter().map(|&d| g.flatten(d)).collect::<Result<Vec<_>>>()?;
                let all = g.concat(&flat, 0)?;
                cosine_distance(g, all, &capture.values)?
            }
            CosineScope::PerLayerMean => {
                let mut total: Option<Var> = None;
                for (i, &d) in dummy.iter().enumerate() {
                    let flat = g.flatten(d)?;
                    let c = cosine_distance(g, flat, capture.block(i))?;
                    total = Some(match total {
                        Some(t) => g.add(t, c)?,
                        None => c,
                    });
                }
                let total = total.ok_or_else(|| Error::usage("model has no parameters"))?;
                g.scale(total, 1.0 / dummy.len() as f64)?
            }
        },
    };
    match spec.kind {
        ObjectiveKind::EuclideanLabelMatch if spec.alpha > 0.0 => {
            let probs = g.softmax(out.logits)?;
            let target = match labels {
                DummyLabels::Fixed(y) => g.constant(one_hot(y, classes)?),
                DummyLabels::Logits(l) => g.softmax(l)?,
            };
            debug_assert_eq!(g.shape(target), [batch, classes]);
            let diff = g.sub(probs, target)?;
            let sq = g.mul(diff, diff)?;
            let term = g.sum(sq)?;
            let term = g.scale(term, spec.alpha)?;
            objective = g.add(objective, term)?;
        }
        ObjectiveKind::CosineTv if spec.alpha > 0.0 => {
            let tv = total_variation(g, x)?;
            let tv = g.scale(tv, spec.alpha)?;
            objective = g.add(objective, tv)?;
        }
        _ => {}
    }
    Ok(objective)
}

fn euclidean(g: &mut Graph, capture: &GradientCapture, dummy: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &d) in dummy.iter().enumerate() {
        let flat = g.flatten(d)?;
        let target = g.constant(crate::autodiff::Tensor::vector(capture.block(i).to_vec()));
        let diff = g.sub(flat, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::usage("model has no parameters"))
}

/// `1 − <d, v> / (‖d‖·‖v‖)` for a graph vector `d` and a fixed vector `v`.
fn cosine_distance(g: &mut Graph, d: Var, victim: &[f64]) -> Result<Var> {
    let vnorm = victim.iter().map(|v| v * v).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Err(Error::NonFinite { op: "cosine_distance" });
    }
    let v = g.constant(crate::autodiff::Tensor::vector(victim.to_vec()));
    let prod = g.mul(d, v)?;
    let dot = g.sum(prod)?;
    let sq = g.mul(d, d)?;
    let norm2 = g.sum(sq)?;
    let norm = g.sqrt(norm2)?;
    let cos = g.div(dot, norm)?;
    g.affine(cos, -1.0 / vnorm, 1.0)
}
