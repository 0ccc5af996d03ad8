use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor with an explicit gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Parameters in model-definition order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::usage("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "set_values",
                    shapes: vec![p.value.shape().to_vec(), v.shape().to_vec()],
                });
            }
            p.value = v;
        }
        Ok(())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|p| {
                let entry = LayoutEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    len: p.value.len(),
                };
                offset += p.value.len();
                entry
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Places every parameter on `graph` as a leaf, in definition order.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Adds the gradients of bound parameter leaves into their accumulators.
    pub fn accumulate(&mut self, bound: &[Var], grads: &Gradients) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(Error::usage("bound variable count differs from parameter count"));
        }
        for (p, var) in self.params.iter_mut().zip(bound) {
            let Some(g) = grads.get(*var) else { continue };
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| {
                p.grad
                    .clone()
                    .ok_or_else(|| Error::usage(format!("parameter `{}` has no gradient", p.name)))
            })
            .collect()
    }

    pub fn set_grads(&mut self, grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::usage("gradient count mismatch"));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = Some(g);
        }
        Ok(())
    }

    /// Flattens populated gradients into a capture with a layout table.
    pub fn flatten_grads(&self) -> Result<GradientCapture> {
        let grads = self.grads()?;
        let mut values = Vec::with_capacity(self.numel());
        for g in &grads {
            values.extend_from_slice(g.data());
        }
        Ok(GradientCapture {
            layout: self.layout(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flattened per-parameter gradients: the observable of a gradient inversion attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCapture {
    pub layout: Vec<LayoutEntry>,
    pub values: Vec<f64>,
}

impl GradientCapture {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, index: usize) -> &[f64] {
        let e = &self.layout[index];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&[f64]> {
        let i = self.layout.iter().position(|e| e.name == name)?;
        Some(self.block(i))
    }

    pub fn unflatten(&self) -> Result<Vec<Tensor>> {
        self.layout
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), self.values[e.offset..e.offset + e.len].to_vec()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks that this capture was produced by parameters with `layout`.
    pub fn check_layout(&self, layout: &[LayoutEntry]) -> Result<()> {
        if self.layout != layout {
            return Err(Error::usage("gradient capture layout does not match the model"));
        }
        Ok(())
    }
}
