//! Optimization-based gradient inversion: reconstruct inputs whose gradient
//! matches an observed capture.

mod objective;
mod run;

pub use objective::{build_objective, total_variation, CosineScope, DummyLabels, ObjectiveKind, ObjectiveSpec};
pub use run::{
    recover_labels, run_attack, step_lr_schedule, AttackConfig, AttackResult, LabelPolicy, OptimizerConfig,
    RecoveredLabels, StopReason, TracePoint, CONVERGED_BELOW,
};
