use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, ExperimentSpec, RunArtifacts, TrainSettings};
use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricOptions;

/// Desk-scale default corpus: four pattern classes of 8x8 grayscale images.
pub const DESK_DATASET: &str = "synthetic:classes=4,per_class=256,size=8,channels=1,noise=0.1";
/// Many-class colour corpus.
pub const COLOR_DATASET: &str = "synthetic:classes=10,per_class=64,size=8,channels=3,noise=0.1";
/// Larger grayscale corpus with fewer classes.
pub const GRAY_DATASET: &str = "synthetic:classes=6,per_class=96,size=16,channels=1,noise=0.1";

pub const DESK_EPOCHS: usize = 50;
pub const BOTTLENECK: &str = "+precode(16,0.001)";
pub const DEFENSES: [&str; 4] = ["none", "ng:1e-2", "ng:1e-3", "gc:0.10"];

pub const PRESETS: [&str; 5] = ["table1", "table2", "table3", "table4", "fig6"];

/// Knobs that shrink or grow every experiment of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PresetOverrides {
    pub victims: Option<usize>,
    pub max_iters: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    /// Replaces the final training epoch; earlier checkpoints beyond it are dropped.
    pub epochs: Option<usize>,
    pub dataset: Option<String>,
}

fn base(name: String, model: &str, dataset: &str, defense: &str, attack: AttackConfig) -> ExperimentSpec {
    ExperimentSpec {
        name,
        model: model.into(),
        dataset: dataset.into(),
        split_seed: 0,
        defense: defense.into(),
        attack,
        victims: 16,
        victim_seed: 0,
        batch_sizes: vec![1],
        checkpoints: vec![DESK_EPOCHS],
        seeds: vec![1, 2, 3],
        train: TrainSettings {
            epochs: DESK_EPOCHS,
            ..TrainSettings::default()
        },
        metrics: MetricOptions::default(),
        victim_kl: true,
        grids: true,
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Model variants sweep: each architecture with and without the bottleneck.
fn table1() -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for arch in ["smlp", "dmlp", "convnet"] {
        for suffix in ["", BOTTLENECK] {
            let model = format!("{arch}{suffix}");
            out.push(base(
                format!("table1_{}", slug(&model)),
                &model,
                DESK_DATASET,
                "none",
                AttackConfig::iga(),
            ));
        }
    }
    out
}

fn defense_grid(prefix: &str, dataset: &str, attack: fn() -> AttackConfig) -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for arch in ["dmlp", "convnet"] {
        for defense in DEFENSES {
            out.push(base(
                format!("{prefix}_{arch}_{}", slug(defense)),
                arch,
                dataset,
                defense,
                attack(),
            ));
        }
        let model = format!("{arch}{BOTTLENECK}");
        out.push(base(
            format!("{prefix}_{}", slug(&model)),
            &model,
            dataset,
            "none",
            attack(),
        ));
    }
    out
}

/// Defense comparison on the desk corpus.
fn table2() -> Vec<ExperimentSpec> {
    defense_grid("table2", DESK_DATASET, AttackConfig::iga)
}

/// Defense comparison on two further corpora.
fn table3() -> Vec<ExperimentSpec> {
    let mut out = defense_grid("table3_color", COLOR_DATASET, AttackConfig::iga);
    out.extend(defense_grid("table3_gray", GRAY_DATASET, AttackConfig::iga));
    out
}

/// Defense comparison under the label-matching Euclidean attack.
fn table4() -> Vec<ExperimentSpec> {
    defense_grid("table4", DESK_DATASET, AttackConfig::cpl)
}

/// Leakage across training progress and victim batch sizes.
fn fig6() -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for arch in ["dmlp", "convnet"] {
        for suffix in ["", BOTTLENECK] {
            let model = format!("{arch}{suffix}");
            let mut spec = base(format!("fig6_{}", slug(&model)), &model, DESK_DATASET, "none", AttackConfig::iga());
            spec.checkpoints = vec![0, 1, DESK_EPOCHS];
            spec.batch_sizes = vec![1, 8, 16];
            out.push(spec);
        }
    }
    out
}

pub fn preset(name: &str, overrides: &PresetOverrides) -> Result<Vec<ExperimentSpec>> {
    let mut specs = match name {
        "table1" => table1(),
        "table2" => table2(),
        "table3" => table3(),
        "table4" => table4(),
        "fig6" => fig6(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    for spec in &mut specs {
        apply_overrides(spec, overrides);
        spec.validate()?;
    }
    Ok(specs)
}

pub fn apply_overrides(spec: &mut ExperimentSpec, o: &PresetOverrides) {
    if let Some(v) = o.victims {
        spec.victims = v;
        for b in &mut spec.batch_sizes {
            *b = (*b).min(v);
        }
        spec.batch_sizes.dedup();
    }
    if let Some(m) = o.max_iters {
        spec.attack.max_iters = m;
        spec.attack.patience = spec.attack.patience.min(m);
    }
    if let Some(s) = &o.seeds {
        spec.seeds = s.clone();
    }
    if let Some(e) = o.epochs {
        let last = spec.train.epochs;
        spec.train.epochs = e;
        for c in &mut spec.checkpoints {
            if *c == last {
                *c = e;
            }
        }
        spec.checkpoints.retain(|&c| c <= e);
        spec.checkpoints.sort_unstable();
        spec.checkpoints.dedup();
    }
    if let Some(d) = &o.dataset {
        spec.dataset = d.clone();
    }
}

/// Runs every experiment of a preset into `out_dir/<experiment name>/`.
pub fn run_preset(name: &str, overrides: &PresetOverrides, out_dir: &Path) -> Result<Vec<RunArtifacts>> {
    let specs = preset(name, overrides)?;
    fs::create_dir_all(out_dir)?;
    specs.iter().map(|s| run_experiment(s, &out_dir.join(&s.name))).collect()
}
