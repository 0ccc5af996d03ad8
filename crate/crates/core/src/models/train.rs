use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{ForwardOptions, Mode, Model};
use crate::autodiff::{Adam, AdamConfig, Graph, Tensor};
use crate::defenses::GradientDefense;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 0,
            checkpoint_epochs: vec![0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(e) = self.checkpoint_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::Config(format!(
                "checkpoint epoch {e} beyond the {} training epochs",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Images `[N, C, H, W]` with one label per row.
#[derive(Debug, Clone, Copy)]
pub struct LabeledView<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
}

impl<'a> LabeledView<'a> {
    pub fn new(images: &'a Tensor, labels: &'a [usize]) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::usage(format!(
                "images {:?} do not pair with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Copies rows `idx` of a batch tensor into a new batch.
pub fn gather(images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let shape = images.shape();
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        if i >= shape[0] {
            return Err(Error::usage(format!("row {i} outside batch of {}", shape[0])));
        }
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = idx.len();
    Tensor::new(out_shape, data)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoints: Vec<Checkpoint>,
    /// Accuracy before training (index 0) and after each epoch.
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub final_loss: f64,
}

/// Fraction of rows classified correctly, evaluated in chunks.
pub fn accuracy(model: &mut Model, data: LabeledView<'_>, opts: &ForwardOptions) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let x = gather(data.images, chunk)?;
        let pred = model.predict(&x, Mode::Eval, opts)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| data.labels[i] == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch Adam on cross-entropy plus any bottleneck KL terms. When a
/// defense is supplied, every step's gradient is perturbed before the update
/// with a sub-seed derived from the run seed and step index.
pub fn train(
    model: &mut Model,
    train_set: LabeledView<'_>,
    test_set: Option<LabeledView<'_>>,
    cfg: &TrainConfig,
    defense: Option<&GradientDefense>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.adam_betas.0,
        beta2: cfg.adam_betas.1,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let eval_opts = ForwardOptions::default();
    let mut report = TrainReport {
        checkpoints: Vec::new(),
        train_accuracy: Vec::new(),
        test_accuracy: Vec::new(),
        final_loss: f64::NAN,
    };
    let record = |model: &mut Model, report: &mut TrainReport, epoch: usize| -> Result<()> {
        report.train_accuracy.push(accuracy(model, train_set, &eval_opts)?);
        if let Some(t) = test_set {
            report.test_accuracy.push(accuracy(model, t, &eval_opts)?);
        }
        if cfg.checkpoint_epochs.contains(&epoch) {
            report.checkpoints.push(Checkpoint::capture(model, epoch, cfg.seed));
        }
        Ok(())
    };
    record(model, &mut report, 0)?;
    let blocks: Vec<(usize, usize)> = model.params().layout().iter().map(|e| (e.offset, e.len)).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_index, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |_| Error::Diverged {
                epoch,
                step: batch_index,
            };
            let x = gather(train_set.images, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, true);
            let xv = g.constant(x);
            let (loss, _) = model
                .loss(&mut g, &bound, xv, &labels, Mode::Train, &ForwardOptions::default(), true)
                .map_err(diverged)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: batch_index,
                });
            }
            let grads = g.backward(loss).map_err(diverged)?;
            let mut flat = Vec::with_capacity(model.params().numel());
            for v in &bound {
                let t = grads.get(*v).expect("all parameters reach the loss");
                flat.extend_from_slice(t.data());
            }
            if let Some(d) = defense {
                d.with_seed(derive_seed(d.seed ^ cfg.seed, &[1, step])).apply_flat(&mut flat, &blocks);
            }
            let mut values = model.params().values();
            let grad_tensors = blocks
                .iter()
                .zip(&values)
                .map(|(&(o, n), v)| Tensor::new(v.shape().to_vec(), flat[o..o + n].to_vec()))
                .collect::<Result<Vec<_>>>()?;
            adam.step(&mut values, &grad_tensors)?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: batch_index,
                });
            }
            model.params_mut().set_values(values)?;
            report.final_loss = value;
            step += 1;
        }
        record(model, &mut report, epoch)?;
    }
    Ok(report)
}
