//! First-order optimizers over flat parameter buffers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam with one moment buffer pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    fn ensure_buffers(&mut self, lens: &[usize]) -> Result<()> {
        if self.first.is_empty() {
            self.first = lens.iter().map(|&n| vec![0.0; n]).collect();
            self.second = lens.iter().map(|&n| vec![0.0; n]).collect();
            return Ok(());
        }
        let same = self.first.len() == lens.len() && self.first.iter().zip(lens).all(|(m, &n)| m.len() == n);
        if !same {
            return Err(Error::usage("adam: parameter layout changed between steps"));
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::usage(format!(
                    "adam: gradient of length {} for parameter of length {}",
                    g.len(),
                    p.len()
                )));
            }
        }
        let lens: Vec<usize> = params.iter().map(Tensor::len).collect();
        self.ensure_buffers(&lens)?;
        self.steps += 1;
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(slot, p.data_mut(), g.data());
        }
        Ok(())
    }

    /// Single flat parameter vector.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "adam: gradient of length {} for parameter of length {}",
                grads.len(),
                params.len()
            )));
        }
        self.ensure_buffers(&[params.len()])?;
        self.steps += 1;
        self.update(0, params, grads);
        Ok(())
    }

    fn update(&mut self, slot: usize, p: &mut [f64], g: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub lr: f64,
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            history: 10,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 20,
        }
    }
}

/// Outcome of one L-BFGS iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsStep {
    /// Objective at the start of the step.
    pub loss: f64,
    /// Objective at the accepted point (equals `loss` when the step was skipped).
    pub new_loss: f64,
    pub step_size: f64,
    pub backtracks: usize,
    pub line_search_failed: bool,
}

type Evaluation = (Vec<f64>, f64, Vec<f64>);

/// Limited-memory BFGS with two-loop recursion and backtracking Armijo search.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    pub config: LbfgsConfig,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    cached: Option<Evaluation>,
    iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            pairs: VecDeque::new(),
            cached: None,
            iterations: 0,
        }
    }

    pub fn history_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Search direction `-H g` from the two-loop recursion.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y) in self.pairs.iter().rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((rho, a));
        }
        if let Some((s, y)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, y), (rho, a)) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|qi| *qi = -*qi);
        q
    }

    pub fn step<F>(&mut self, x: &mut [f64], mut eval: F) -> Result<LbfgsStep>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (loss, grad) = match self.cached.take() {
            Some((at, f, g)) if at.as_slice() == &x[..] => (f, g),
            _ => eval(x)?,
        };
        if grad.len() != x.len() {
            return Err(Error::usage("lbfgs: gradient length differs from parameter length"));
        }
        let mut dir = self.direction(&grad);
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 || !slope.is_finite() {
            self.pairs.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &dir);
        }
        let mut t = if self.iterations == 0 || self.pairs.is_empty() {
            let l1: f64 = grad.iter().map(|g| g.abs()).sum();
            self.config.lr * (1.0f64).min(1.0 / l1.max(f64::MIN_POSITIVE))
        } else {
            self.config.lr
        };
        self.iterations += 1;

        let mut trial = vec![0.0; x.len()];
        for backtracks in 0..=self.config.max_backtracks {
            for i in 0..x.len() {
                trial[i] = x[i] + t * dir[i];
            }
            if let Ok((f_new, g_new)) = eval(&trial) {
                if f_new.is_finite() && f_new <= loss + self.config.c1 * t * slope {
                    let s: Vec<f64> = dir.iter().map(|d| t * d).collect();
                    let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
                    if dot(&s, &y) > 1e-12 {
                        self.pairs.push_back((s, y));
                        while self.pairs.len() > self.config.history.max(1) {
                            self.pairs.pop_front();
                        }
                    }
                    x.copy_from_slice(&trial);
                    self.cached = Some((trial, f_new, g_new));
                    return Ok(LbfgsStep {
                        loss,
                        new_loss: f_new,
                        step_size: t,
                        backtracks,
                        line_search_failed: false,
                    });
                }
            }
            t *= self.config.shrink;
        }
        self.cached = Some((x.to_vec(), loss, grad));
        Ok(LbfgsStep {
            loss,
            new_loss: loss,
            step_size: 0.0,
            backtracks: self.config.max_backtracks,
            line_search_failed: true,
        })
    }
}
