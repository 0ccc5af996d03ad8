use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{load_dataset, Dataset, DatasetSource, SplitData};
use super::render::render_grid;
use super::victims::{capture_victim_gradient, sample_victims, VictimSet};
use crate::attacks::{run_attack, AttackConfig, AttackResult};
use crate::autodiff::Tensor;
use crate::defenses::GradientDefense;
use crate::error::{Error, Result};
use crate::metrics::{attack_success_rate, match_reconstructions, score, ImageMetrics, MetricOptions};
use crate::models::{gather, train, Checkpoint, ModelPreset, Model, TrainConfig, TrainReport};
use crate::seeds::derive_seed;

mod stage {
    pub const MODEL: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const TRAIN_DEFENSE: u64 = 3;
    pub const CAPTURE_NOISE: u64 = 4;
    pub const CAPTURE_DEFENSE: u64 = 5;
    pub const ATTACK: u64 = 6;
}

fn default_defense() -> String {
    "none".into()
}

fn default_batches() -> Vec<usize> {
    vec![1]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// One model/defense/attack configuration swept over seeds, checkpoints and
/// victim batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Model preset, e.g. `dmlp+precode(16,0.001)`.
    pub model: String,
    /// Dataset source, e.g. `synthetic:classes=4,per_class=256`.
    pub dataset: String,
    #[serde(default)]
    pub split_seed: u64,
    /// Defense spec applied during training and to every victim capture.
    #[serde(default = "default_defense")]
    pub defense: String,
    pub attack: AttackConfig,
    pub victims: usize,
    #[serde(default)]
    pub victim_seed: u64,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    pub checkpoints: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub metrics: MetricOptions,
    /// Include bottleneck KL terms in the simulated victim step.
    #[serde(default = "default_true")]
    pub victim_kl: bool,
    #[serde(default = "default_true")]
    pub grids: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if self.seeds.is_empty() || self.checkpoints.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::Config(format!("`{}`: seeds, checkpoints and batch_sizes must be non-empty", self.name)));
        }
        if self.victims == 0 || self.batch_sizes.contains(&0) {
            return Err(Error::Config(format!("`{}`: victim and batch sizes must be positive", self.name)));
        }
        if let Some(e) = self.checkpoints.iter().find(|&&e| e > self.train.epochs) {
            return Err(Error::Config(format!(
                "`{}`: checkpoint {e} lies beyond the {} training epochs",
                self.name, self.train.epochs
            )));
        }
        self.model.parse::<ModelPreset>()?;
        self.dataset.parse::<DatasetSource>()?;
        self.defense.parse::<GradientDefense>()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub seed: u64,
    pub epoch: usize,
    pub batch_size: usize,
    /// Dataset index of the victim image.
    pub image_id: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub epoch: usize,
    pub batch_size: usize,
    pub seeds: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub asr: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub image_ids: Vec<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub seed: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    pub train_defense_seed: u64,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub spec: ExperimentSpec,
    pub victims: Vec<usize>,
    pub files: Vec<String>,
    pub seeds: Vec<SeedLedger>,
    pub failures: Vec<Failure>,
}

/// Everything a run produced, in memory and on disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub rows: Vec<ImageRow>,
    pub aggregate: Vec<AggregateRow>,
    pub manifest: Manifest,
}

impl RunArtifacts {
    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CONFIG_TOML: &str = "config.toml";

struct Task {
    seed: u64,
    epoch: usize,
    batch_size: usize,
    batch_index: usize,
    victims: Vec<usize>,
}

struct TaskOutput {
    rows: Vec<ImageRow>,
    originals: Vec<Tensor>,
    reconstructions: Vec<Tensor>,
    result: AttackResult,
}

/// How victims are captured, attacked and scored.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackJob {
    pub attack: AttackConfig,
    pub defense: GradientDefense,
    pub metrics: MetricOptions,
    pub victim_kl: bool,
}

fn split_images(batch: &Tensor) -> Result<Vec<Tensor>> {
    let s = batch.shape();
    (0..s[0]).map(|i| gather(batch, &[i])?.reshaped(&s[1..])).collect()
}

fn run_task(
    task: &Task,
    ck: &Checkpoint,
    victims: &VictimSet,
    job: &AttackJob,
) -> Result<TaskOutput> {
    let path = [task.epoch as u64, task.batch_size as u64, task.batch_index as u64];
    let sub = |stage: u64| {
        let mut p = vec![stage];
        p.extend_from_slice(&path);
        derive_seed(task.seed, &p)
    };
    let mut model = ck.restore()?;
    model.reseed_noise(sub(stage::CAPTURE_NOISE));
    let positions: Vec<usize> = task
        .victims
        .iter()
        .map(|v| victims.indices.iter().position(|i| i == v).expect("victim index"))
        .collect();
    let images = gather(victims.images(), &positions)?;
    let labels: Vec<usize> = positions.iter().map(|&p| victims.labels[p]).collect();
    let capture = capture_victim_gradient(
        &mut model,
        &images,
        &labels,
        &job.defense.with_seed(sub(stage::CAPTURE_DEFENSE)),
        job.victim_kl,
    )?;
    let result = run_attack(&model, &capture, images.shape(), &job.attack, Some(&labels), sub(stage::ATTACK))?;
    let originals = split_images(&images)?;
    let recs = split_images(&result.reconstructed)?;
    let order = if originals.len() > 1 {
        match_reconstructions(&originals, &recs, &job.metrics)?
    } else {
        vec![0]
    };
    let mut rows = Vec::with_capacity(originals.len());
    let mut matched = Vec::with_capacity(originals.len());
    for (i, orig) in originals.iter().enumerate() {
        let rec = &recs[order[i]];
        let m: ImageMetrics = score(orig, rec, &job.metrics)?;
        rows.push(ImageRow {
            seed: task.seed,
            epoch: task.epoch,
            batch_size: task.batch_size,
            image_id: task.victims[i],
            mse: m.mse,
            psnr: m.psnr,
            ssim: m.ssim,
            success: m.success(job.metrics.threshold),
        });
        matched.push(rec.clone());
    }
    Ok(TaskOutput {
        rows,
        originals,
        reconstructions: matched,
        result,
    })
}

fn train_seed(
    seed: u64,
    spec: &ExperimentSpec,
    preset: &ModelPreset,
    ds: &Dataset,
    defense: &GradientDefense,
    train_data: &SplitData,
    test_data: &SplitData,
) -> Result<(SeedLedger, TrainReport)> {
    let model_seed = derive_seed(seed, &[stage::MODEL]);
    let train_seed = derive_seed(seed, &[stage::TRAIN]);
    let train_defense_seed = derive_seed(seed, &[stage::TRAIN_DEFENSE]);
    let model_spec = preset.model_spec(ds.shape(), ds.classes)?;
    let mut model = Model::build(&model_spec, model_seed)?;
    let cfg = TrainConfig {
        epochs: spec.train.epochs,
        batch_size: spec.train.batch_size,
        learning_rate: spec.train.learning_rate,
        seed: train_seed,
        checkpoint_epochs: spec.checkpoints.clone(),
        ..TrainConfig::default()
    };
    let d = defense.with_seed(train_defense_seed);
    let test = (!test_data.labels.is_empty()).then(|| test_data.view());
    let report = train(&mut model, train_data.view(), test, &cfg, (!d.is_none()).then_some(&d))?;
    Ok((
        SeedLedger {
            seed,
            model_seed,
            train_seed,
            train_defense_seed,
            train_accuracy: report.train_accuracy.clone(),
            test_accuracy: report.test_accuracy.clone(),
        },
        report,
    ))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn aggregate(rows: &[ImageRow], ledgers: &[SeedLedger], threshold: f64) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(usize, usize), BTreeMap<u64, Vec<&ImageRow>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.epoch, r.batch_size))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((epoch, batch_size), per_seed) in groups {
        let mut acc = AggregateRow {
            epoch,
            batch_size,
            seeds: per_seed.len(),
            mse: 0.0,
            psnr: 0.0,
            ssim: 0.0,
            asr: 0.0,
            train_acc: 0.0,
            test_acc: 0.0,
        };
        for (seed, rs) in &per_seed {
            let n = rs.len() as f64;
            acc.mse += rs.iter().map(|r| r.mse).sum::<f64>() / n;
            acc.psnr += rs.iter().map(|r| r.psnr).sum::<f64>() / n;
            acc.ssim += rs.iter().map(|r| r.ssim).sum::<f64>() / n;
            acc.asr += attack_success_rate(&rs.iter().map(|r| r.ssim).collect::<Vec<_>>(), threshold)?;
            if let Some(l) = ledgers.iter().find(|l| l.seed == *seed) {
                acc.train_acc += l.train_accuracy.get(epoch).copied().unwrap_or(f64::NAN);
                acc.test_acc += l.test_accuracy.get(epoch).copied().unwrap_or(f64::NAN);
            }
        }
        let k = per_seed.len() as f64;
        for v in [&mut acc.mse, &mut acc.psnr, &mut acc.ssim, &mut acc.asr, &mut acc.train_acc, &mut acc.test_acc] {
            *v /= k;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Trains (or reuses) one model per seed, attacks every victim batch at every
/// requested checkpoint and writes per-image and aggregate CSVs, image grids,
/// a config snapshot and a manifest into `out_dir`. Failures of individual
/// stages are recorded in the manifest; the remaining work still runs.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunArtifacts> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let preset: ModelPreset = spec.model.parse()?;
    let source: DatasetSource = spec.dataset.parse()?;
    let defense: GradientDefense = spec.defense.parse()?;
    let ds = load_dataset(&source, spec.split_seed)?;
    let coverage = spec.victims >= ds.classes;
    let victims = sample_victims(&ds, spec.victims, spec.victim_seed, coverage)?;
    let train_data = SplitData::from(&ds, &ds.train)?;
    let test_data = SplitData::from(&ds, &ds.test)?;

    let trained: Vec<(u64, Result<(SeedLedger, TrainReport)>)> = spec
        .seeds
        .par_iter()
        .map(|&seed| (seed, train_seed(seed, spec, &preset, &ds, &defense, &train_data, &test_data)))
        .collect();

    let mut failures = Vec::new();
    let mut ledgers = Vec::new();
    let mut checkpoints: BTreeMap<(u64, usize), Checkpoint> = BTreeMap::new();
    for (seed, outcome) in trained {
        match outcome {
            Ok((ledger, report)) => {
                for ck in report.checkpoints {
                    checkpoints.insert((seed, ck.epoch()), ck);
                }
                ledgers.push(ledger);
            }
            Err(e) => failures.push(Failure {
                seed,
                epoch: None,
                batch_size: None,
                image_ids: Vec::new(),
                error: e.to_string(),
            }),
        }
    }

    let mut tasks = Vec::new();
    for ledger in &ledgers {
        for &epoch in &spec.checkpoints {
            for &b in &spec.batch_sizes {
                for (batch_index, chunk) in victims.indices.chunks(b).enumerate() {
                    tasks.push(Task {
                        seed: ledger.seed,
                        epoch,
                        batch_size: b,
                        batch_index,
                        victims: chunk.to_vec(),
                    });
                }
            }
        }
    }
    let job = AttackJob {
        attack: spec.attack.clone(),
        defense,
        metrics: spec.metrics,
        victim_kl: spec.victim_kl,
    };
    let outputs: Vec<(usize, Result<TaskOutput>)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let ck = &checkpoints[&(t.seed, t.epoch)];
            (i, run_task(t, ck, &victims, &job))
        })
        .collect();

    let mut rows = Vec::new();
    // (seed, epoch, batch size) -> (originals, matched reconstructions)
    let mut grids: BTreeMap<_, (Vec<Tensor>, Vec<Tensor>)> = BTreeMap::new();
    for (i, out) in outputs {
        let t = &tasks[i];
        match out {
            Ok(o) => {
                rows.extend(o.rows);
                let g = grids.entry((t.seed, t.epoch, t.batch_size)).or_default();
                g.0.extend(o.originals);
                g.1.extend(o.reconstructions);
            }
            Err(e) => failures.push(Failure {
                seed: t.seed,
                epoch: Some(t.epoch),
                batch_size: Some(t.batch_size),
                image_ids: t.victims.clone(),
                error: e.to_string(),
            }),
        }
    }
    rows.sort_by(|a, b| {
        (a.seed, a.epoch, a.batch_size, a.image_id).cmp(&(b.seed, b.epoch, b.batch_size, b.image_id))
    });
    let aggregate = aggregate(&rows, &ledgers, spec.metrics.threshold)?;

    let mut files = vec![PER_IMAGE_CSV.to_string(), AGGREGATE_CSV.to_string(), CONFIG_TOML.to_string()];
    write_rows(
        &out_dir.join(PER_IMAGE_CSV),
        &rows,
        &["seed", "epoch", "batch_size", "image_id", "mse", "psnr", "ssim", "success"],
    )?;
    write_rows(
        &out_dir.join(AGGREGATE_CSV),
        &aggregate,
        &["epoch", "batch_size", "seeds", "mse", "psnr", "ssim", "asr", "train_acc", "test_acc"],
    )?;
    fs::write(out_dir.join(CONFIG_TOML), spec.to_toml()?)?;
    if spec.grids {
        for ((seed, epoch, b), (orig, rec)) in &grids {
            let name = format!("grid_seed{seed}_epoch{epoch}_batch{b}.png");
            match render_grid(orig, rec, &out_dir.join(&name)) {
                Ok(()) => files.push(name),
                Err(e) => failures.push(Failure {
                    seed: *seed,
                    epoch: Some(*epoch),
                    batch_size: Some(*b),
                    image_ids: Vec::new(),
                    error: e.to_string(),
                }),
            }
        }
    }
    files.push(MANIFEST_JSON.to_string());
    ledgers.sort_by_key(|l| l.seed);
    let manifest = Manifest {
        name: spec.name.clone(),
        spec: spec.clone(),
        victims: victims.indices.clone(),
        files,
        seeds: ledgers,
        failures,
    };
    fs::write(out_dir.join(MANIFEST_JSON), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunArtifacts {
        dir: out_dir.to_path_buf(),
        rows,
        aggregate,
        manifest,
    })
}

/// Reads a per-image CSV written by [`run_experiment`].
pub fn read_rows(path: &Path) -> Result<Vec<ImageRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Recomputes aggregate rows from per-image rows, without accuracy columns.
pub fn summarize_rows(rows: &[ImageRow], threshold: f64) -> Result<Vec<AggregateRow>> {
    aggregate(rows, &[], threshold)
}

/// Attacks `victims` in consecutive batches of `batch_size` against a single
/// checkpoint, writing per-image metrics, one loss trace per batch and an
/// image grid into `out_dir`.
pub fn attack_checkpoint(
    ck: &Checkpoint,
    victims: &VictimSet,
    job: &AttackJob,
    batch_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ImageRow>> {
    job.attack.validate()?;
    if batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    fs::create_dir_all(out_dir)?;
    let tasks: Vec<Task> = victims
        .indices
        .chunks(batch_size)
        .enumerate()
        .map(|(batch_index, chunk)| Task {
            seed,
            epoch: ck.epoch(),
            batch_size,
            batch_index,
            victims: chunk.to_vec(),
        })
        .collect();
    let outputs = tasks
        .par_iter()
        .map(|t| run_task(t, ck, victims, job))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let (mut originals, mut recs) = (Vec::new(), Vec::new());
    for (i, o) in outputs.into_iter().enumerate() {
        let mut trace = Vec::new();
        o.result.write_trace_csv(&mut trace)?;
        fs::write(out_dir.join(format!("trace_batch{i}.csv")), trace)?;
        rows.extend(o.rows);
        originals.extend(o.originals);
        recs.extend(o.reconstructions);
    }
    write_rows(
        &out_dir.join(PER_IMAGE_CSV),
        &rows,
        &["seed", "epoch", "batch_size", "image_id", "mse", "psnr", "ssim", "success"],
    )?;
    render_grid(&originals, &recs, &out_dir.join("grid.png"))?;
    Ok(rows)
}
