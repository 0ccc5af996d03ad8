use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::{build_objective, CosineScope, DummyLabels, ObjectiveKind, ObjectiveSpec};
use crate::autodiff::{Adam, AdamConfig, GradientCapture, Graph, Lbfgs, LbfgsConfig, Tensor};
use crate::error::{Error, Result};
use crate::models::{analytic_label_from_gradient, ForwardOptions, Model};
use crate::seeds::derive_seed;

/// Objective value below which a Euclidean attack is considered solved.
pub const CONVERGED_BELOW: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Adam with step decay ×0.1 at each milestone; `None` uses 3/8, 5/8
    /// and 7/8 of the iteration budget.
    Adam { lr: f64, milestones: Option<Vec<usize>> },
    Lbfgs { lr: f64, history: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Ground truth is handed to the attacker.
    Known,
    /// Read from the output-layer gradient (single-sample captures only).
    Analytic,
    /// Optimized jointly with the input as softmax-normalized logits.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub objective: ObjectiveKind,
    pub alpha: f64,
    #[serde(default)]
    pub cosine_scope: CosineScope,
    pub optimizer: OptimizerConfig,
    pub max_iters: usize,
    pub patience: usize,
    /// Additional runs from fresh dummy initializations.
    pub restarts: usize,
    pub labels: LabelPolicy,
    /// Include bottleneck KL terms in the dummy loss, mirroring the victim.
    #[serde(default = "default_true")]
    pub include_kl: bool,
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    /// Cosine similarity with a TV prior, Adam and step decay.
    pub fn iga() -> Self {
        Self {
            objective: ObjectiveKind::CosineTv,
            alpha: 1e-6,
            cosine_scope: CosineScope::Whole,
            optimizer: OptimizerConfig::Adam { lr: 0.01, milestones: None },
            max_iters: 7000,
            patience: 1200,
            restarts: 0,
            labels: LabelPolicy::Known,
            include_kl: true,
        }
    }

    /// Euclidean gradient matching with L-BFGS, labels optimized jointly.
    pub fn dlg() -> Self {
        Self {
            objective: ObjectiveKind::Euclidean,
            alpha: 0.0,
            cosine_scope: CosineScope::Whole,
            optimizer: OptimizerConfig::Lbfgs { lr: 1.0, history: 100 },
            max_iters: 300,
            patience: 100,
            restarts: 0,
            labels: LabelPolicy::Joint,
            include_kl: true,
        }
    }

    /// As [`AttackConfig::dlg`] with labels read from the gradient.
    pub fn idlg() -> Self {
        Self {
            labels: LabelPolicy::Analytic,
            ..Self::dlg()
        }
    }

    /// Euclidean matching plus a label-match regularizer.
    pub fn cpl() -> Self {
        Self {
            objective: ObjectiveKind::EuclideanLabelMatch,
            alpha: 1.0,
            labels: LabelPolicy::Analytic,
            ..Self::dlg()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "iga" => Ok(Self::iga()),
            "dlg" => Ok(Self::dlg()),
            "idlg" => Ok(Self::idlg()),
            "cpl" => Ok(Self::cpl()),
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if self.patience == 0 || self.patience > self.max_iters {
            return Err(Error::Config("patience must lie in 1..=max_iters".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.optimizer {
            OptimizerConfig::Adam { milestones: Some(m), .. } => m.clone(),
            OptimizerConfig::Adam { milestones: None, .. } => {
                [3, 5, 7].iter().map(|k| self.max_iters * k / 8).collect()
            }
            OptimizerConfig::Lbfgs { .. } => Vec::new(),
        }
    }

    fn objective_spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            kind: self.objective,
            alpha: self.alpha,
            scope: self.cosine_scope,
            include_kl: self.include_kl,
        }
    }
}

/// `base · 0.1^(milestones ≤ iteration)`.
pub fn step_lr_schedule(base: f64, iteration: usize, milestones: &[usize]) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration >= m).count();
    base * 0.1f64.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecoveredLabels {
    Fixed(Vec<usize>),
    Joint,
}

/// Resolves the labels an attack will use under `policy`.
pub fn recover_labels(
    capture: &GradientCapture,
    model: &Model,
    policy: LabelPolicy,
    batch: usize,
    truth: Option<&[usize]>,
) -> Result<RecoveredLabels> {
    match policy {
        LabelPolicy::Known => truth
            .map(|t| RecoveredLabels::Fixed(t.to_vec()))
            .ok_or_else(|| Error::usage("known-label policy needs ground-truth labels")),
        LabelPolicy::Analytic => {
            if batch != 1 {
                return Err(Error::Unsupported(format!(
                    "analytic label recovery needs batch size 1, got {batch}"
                )));
            }
            Ok(RecoveredLabels::Fixed(vec![analytic_label_from_gradient(capture, model)?]))
        }
        LabelPolicy::Joint => Ok(RecoveredLabels::Joint),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Patience,
    Converged,
    /// The objective became non-finite; the best earlier iterate is kept.
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Best-objective iterate, shaped like the victim batch.
    pub reconstructed: Tensor,
    pub recovered_labels: Vec<usize>,
    pub loss_trace: Vec<TracePoint>,
    pub iterations_used: usize,
    pub stop_reason: StopReason,
    pub best_objective: f64,
    pub restart: usize,
}

impl AttackResult {
    /// Writes `iteration,objective,lr` rows.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "objective", "lr"])?;
        for p in &self.loss_trace {
            w.write_record([p.iteration.to_string(), p.objective.to_string(), p.lr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates objective and gradient at a flat point `[x', label logits]`.
struct Evaluator<'a> {
    model: Model,
    capture: &'a GradientCapture,
    shape: Vec<usize>,
    classes: usize,
    labels: &'a RecoveredLabels,
    spec: ObjectiveSpec,
}

impl Evaluator<'_> {
    fn input_len(&self) -> usize {
        self.shape.iter().product()
    }

    fn eval(&mut self, point: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.input_len();
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(self.shape.clone(), point[..n].to_vec())?);
        let mut wrt = vec![x];
        let labels = match self.labels {
            RecoveredLabels::Fixed(y) => DummyLabels::Fixed(y),
            RecoveredLabels::Joint => {
                let l = g.variable(Tensor::new(vec![self.shape[0], self.classes], point[n..].to_vec())?);
                wrt.push(l);
                DummyLabels::Logits(l)
            }
        };
        let obj = build_objective(
            &mut g,
            &mut self.model,
            self.capture,
            x,
            labels,
            &self.spec,
            &ForwardOptions::default(),
        )?;
        let value = g.value(obj).item();
        let grads = g.grad(obj, &wrt, false)?;
        let mut flat = Vec::with_capacity(point.len());
        for v in grads {
            flat.extend_from_slice(g.value(v).data());
        }
        if !value.is_finite() || flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "attack_objective" });
        }
        Ok((value, flat))
    }
}

struct RestartOutcome {
    best: f64,
    best_point: Vec<f64>,
    trace: Vec<TracePoint>,
    iterations: usize,
    stop: StopReason,
}

/// Tracks the best-so-far objective and the patience counter.
struct Progress {
    best: f64,
    best_point: Vec<f64>,
    since_best: usize,
}

impl Progress {
    fn observe(&mut self, value: f64, point: &[f64]) {
        if value < self.best {
            self.best = value;
            self.best_point.clear();
            self.best_point.extend_from_slice(point);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
    }
}

fn run_restart(ev: &mut Evaluator<'_>, cfg: &AttackConfig, mut point: Vec<f64>) -> Result<RestartOutcome> {
    let euclidean = matches!(cfg.objective, ObjectiveKind::Euclidean | ObjectiveKind::EuclideanLabelMatch);
    let mut progress = Progress {
        best: f64::INFINITY,
        best_point: point.clone(),
        since_best: 0,
    };
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;
    match &cfg.optimizer {
        OptimizerConfig::Adam { lr, .. } => {
            let milestones = cfg.milestones();
            let mut adam = Adam::new(AdamConfig::with_lr(*lr));
            for it in 0..cfg.max_iters {
                let rate = step_lr_schedule(*lr, it, &milestones);
                let (value, grad) = match ev.eval(&point) {
                    Ok(r) => r,
                    Err(Error::NonFinite { .. }) if it > 0 => {
                        stop = StopReason::NonFinite;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                iterations = it + 1;
                trace.push(TracePoint {
                    iteration: iterations,
                    objective: value,
                    lr: rate,
                });
                progress.observe(value, &point);
                if euclidean && value < CONVERGED_BELOW {
                    stop = StopReason::Converged;
                    break;
                }
                if progress.since_best >= cfg.patience {
                    stop = StopReason::Patience;
                    break;
                }
                adam.set_lr(rate);
                adam.step_flat(&mut point, &grad)?;
            }
        }
        OptimizerConfig::Lbfgs { lr, history } => {
            let mut lbfgs = Lbfgs::new(LbfgsConfig {
                lr: *lr,
                history: *history,
                ..LbfgsConfig::default()
            });
            for it in 0..cfg.max_iters {
                let before = point.clone();
                let step = match lbfgs.step(&mut point, |p| ev.eval(p)) {
                    Ok(s) => s,
                    Err(Error::NonFinite { .. }) if it > 0 => {
                        stop = StopReason::NonFinite;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                if it == 0 {
                    progress.observe(step.loss, &before);
                }
                iterations = it + 1;
                trace.push(TracePoint {
                    iteration: iterations,
                    objective: step.new_loss,
                    lr: step.step_size,
                });
                progress.observe(step.new_loss, &point);
                if euclidean && step.new_loss < CONVERGED_BELOW {
                    stop = StopReason::Converged;
                    break;
                }
                if progress.since_best >= cfg.patience {
                    stop = StopReason::Patience;
                    break;
                }
            }
        }
    }
    Ok(RestartOutcome {
        best: progress.best,
        best_point: progress.best_point,
        trace,
        iterations,
        stop,
    })
}

/// Reconstructs a victim batch of shape `victim_shape` from `capture`.
///
/// Each restart draws its dummy input from N(0, 1) with a seed derived from
/// `seed` and the restart index; bottleneck noise streams are reseeded the
/// same way, so `(seed, cfg)` determine the result.
pub fn run_attack(
    model: &Model,
    capture: &GradientCapture,
    victim_shape: &[usize],
    cfg: &AttackConfig,
    truth: Option<&[usize]>,
    seed: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    capture.check_layout(&model.params().layout())?;
    let input = model.spec().input;
    if victim_shape.len() != 4 || victim_shape[1..] != input.dims() {
        return Err(Error::usage(format!(
            "victim shape {victim_shape:?} does not match model input {:?}",
            input.dims()
        )));
    }
    let batch = victim_shape[0];
    if let Some(t) = truth {
        if t.len() != batch {
            return Err(Error::usage("label count differs from the victim batch"));
        }
    }
    let labels = recover_labels(capture, model, cfg.labels, batch, truth)?;
    let classes = model.spec().classes;
    let n = victim_shape.iter().product::<usize>();
    let extra = if labels == RecoveredLabels::Joint { batch * classes } else { 0 };

    let mut winner: Option<(usize, RestartOutcome)> = None;
    let mut last_error = None;
    for restart in 0..=cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[restart as u64, 0]));
        let point: Vec<f64> = (0..n + extra).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut model = model.clone();
        model.reseed_noise(derive_seed(seed, &[restart as u64, 1]));
        let mut ev = Evaluator {
            model,
            capture,
            shape: victim_shape.to_vec(),
            classes,
            labels: &labels,
            spec: cfg.objective_spec(),
        };
        match run_restart(&mut ev, cfg, point) {
            Ok(outcome) => {
                if winner.as_ref().is_none_or(|(_, w)| outcome.best < w.best) {
                    winner = Some((restart, outcome));
                }
            }
            Err(e @ Error::NonFinite { .. }) => last_error = Some(e),
            Err(e) => return Err(e),
        }
    }
    let Some((restart, outcome)) = winner else {
        return Err(Error::Attack(format!(
            "objective non-finite at initialization in all {} restarts ({})",
            cfg.restarts + 1,
            last_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    };
    let recovered_labels = match &labels {
        RecoveredLabels::Fixed(y) => y.clone(),
        RecoveredLabels::Joint => outcome.best_point[n..]
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect(),
    };
    Ok(AttackResult {
        reconstructed: Tensor::new(victim_shape.to_vec(), outcome.best_point[..n].to_vec())?,
        recovered_labels,
        loss_trace: outcome.trace,
        iterations_used: outcome.iterations,
        stop_reason: outcome.stop,
        best_objective: outcome.best,
        restart,
    })
}
