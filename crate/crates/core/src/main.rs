use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gradleak::attacks::AttackConfig;
use gradleak::defenses::GradientDefense;
use gradleak::harness::dataset::{write_cifar, write_idx, write_image_dir, CifarVariant};
use gradleak::harness::{
    attack_checkpoint, load_dataset, preset, read_rows, run_experiment, sample_victims, summarize_rows, AggregateRow,
    AttackJob, DatasetSource, ExperimentSpec, PresetOverrides, SplitData, PER_IMAGE_CSV, PRESETS,
};
use gradleak::metrics::{MetricOptions, SUCCESS_THRESHOLD};
use gradleak::models::{train, Checkpoint, Model, ModelPreset, TrainConfig};
use gradleak::{Error, Result};

#[derive(Parser)]
#[command(name = "gradleak", version, about = "Gradient inversion attacks and defenses at desk scale")]
struct Cli {
    /// Root directory for outputs when `--out` is not given.
    #[arg(long, global = true, env = "GRADLEAK_ARTIFACTS", default_value = "artifacts")]
    artifacts: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus an accuracy log.
    Train(TrainArgs),
    /// Attack victim images against a saved checkpoint.
    Attack(AttackArgs),
    /// Summarize a per-image results file.
    Evaluate(EvaluateArgs),
    /// Run a named experiment preset or a TOML experiment file.
    Reproduce(ReproduceArgs),
    /// Inspect or convert datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args)]
struct DataArgs {
    /// `synthetic[:k=v,...]`, `cifar10:<file>`, `cifar100:<file>`, `idx:<images>,<labels>` or `dir:<root>`.
    #[arg(long, default_value = "synthetic:classes=4,per_class=256,size=8,channels=1,noise=0.1")]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model preset, e.g. `smlp`, `dmlp@128`, `convnet+precode(16,0.001)`.
    #[arg(long, default_value = "smlp")]
    model: String,
    /// `none`, `ng:<sigma>`, `gc:<ratio>` or `gc:<ratio>:layer`.
    #[arg(long, default_value = "none")]
    defense: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epochs at which to save checkpoints.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    checkpoints: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `iga`, `dlg`, `idlg` or `cpl`.
    #[arg(long, default_value = "iga")]
    attack: String,
    #[arg(long, default_value = "none")]
    defense: String,
    #[arg(long, default_value_t = 16)]
    victims: usize,
    #[arg(long, default_value_t = 0)]
    victim_seed: u64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A per-image CSV or a directory containing one.
    results: PathBuf,
    #[arg(long, default_value_t = SUCCESS_THRESHOLD)]
    threshold: f64,
    /// Also write the summary as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Preset name; omit when `--config` is given.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    victims: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dataset: Option<String>,
    /// Print the expanded experiment files instead of running them.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Print size, shape and class balance.
    Inspect(DataArgs),
    /// Write a dataset in another on-disk format.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Idx,
    Cifar10,
    Cifar100,
    Dir,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    format: Format,
    /// Output file (cifar), directory (dir) or file stem (idx).
    #[arg(long)]
    out: PathBuf,
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join(default))
}

fn cmd_train(a: &TrainArgs, root: &Path) -> Result<()> {
    let out = out_dir(&a.out, root, "train");
    std::fs::create_dir_all(&out)?;
    let ds = load_dataset(&a.data.dataset.parse()?, a.data.split_seed)?;
    let preset: ModelPreset = a.model.parse()?;
    let defense: GradientDefense = a.defense.parse()?;
    let mut model = Model::build(&preset.model_spec(ds.shape(), ds.classes)?, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        checkpoint_epochs: a.checkpoints.clone(),
        ..TrainConfig::default()
    };
    let (tr, te) = (SplitData::from(&ds, &ds.train)?, SplitData::from(&ds, &ds.test)?);
    let test = (!te.labels.is_empty()).then(|| te.view());
    let d = defense.with_seed(a.seed);
    let report = train(&mut model, tr.view(), test, &cfg, (!d.is_none()).then_some(&d))?;
    for ck in &report.checkpoints {
        let path = out.join(format!("epoch{}.ckpt", ck.epoch()));
        ck.save(&path)?;
        println!("wrote {}", path.display());
    }
    let mut w = csv::Writer::from_path(out.join("accuracy.csv"))?;
    w.write_record(["epoch", "train_acc", "test_acc"])?;
    for (e, acc) in report.train_accuracy.iter().enumerate() {
        let test = report.test_accuracy.get(e).map_or(String::new(), |t| t.to_string());
        w.write_record([e.to_string(), acc.to_string(), test])?;
    }
    w.flush()?;
    println!(
        "final train accuracy {:.4}, test accuracy {}",
        report.train_accuracy.last().copied().unwrap_or(f64::NAN),
        report.test_accuracy.last().map_or("n/a".into(), |t| format!("{t:.4}"))
    );
    Ok(())
}

fn print_summary(rows: &[AggregateRow]) {
    println!("{:>6} {:>6} {:>5} {:>10} {:>8} {:>8} {:>6}", "epoch", "batch", "seeds", "mse", "psnr", "ssim", "asr");
    for r in rows {
        println!(
            "{:>6} {:>6} {:>5} {:>10.3e} {:>8.3} {:>8.4} {:>6.3}",
            r.epoch, r.batch_size, r.seeds, r.mse, r.psnr, r.ssim, r.asr
        );
    }
}

fn cmd_attack(a: &AttackArgs, root: &Path) -> Result<()> {
    let out = out_dir(&a.out, root, "attack");
    let ds = load_dataset(&a.data.dataset.parse()?, a.data.split_seed)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut attack = AttackConfig::by_name(&a.attack)?;
    if let Some(m) = a.max_iters {
        attack.max_iters = m;
        attack.patience = attack.patience.min(m);
    }
    if let Some(r) = a.restarts {
        attack.restarts = r;
    }
    let victims = sample_victims(&ds, a.victims, a.victim_seed, a.victims >= ds.classes)?;
    let job = AttackJob {
        attack,
        defense: a.defense.parse()?,
        metrics: MetricOptions::default(),
        victim_kl: true,
    };
    let rows = attack_checkpoint(&ck, &victims, &job, a.batch_size, a.seed, &out)?;
    print_summary(&summarize_rows(&rows, job.metrics.threshold)?);
    println!("results in {}", out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = if a.results.is_dir() { a.results.join(PER_IMAGE_CSV) } else { a.results.clone() };
    let summary = summarize_rows(&read_rows(&file)?, a.threshold)?;
    print_summary(&summary);
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out)?;
        for r in &summary {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_reproduce(a: &ReproduceArgs, root: &Path) -> Result<()> {
    let overrides = PresetOverrides {
        victims: a.victims,
        max_iters: a.max_iters,
        seeds: a.seeds.clone(),
        epochs: a.epochs,
        dataset: a.dataset.clone(),
    };
    let (specs, label) = match (&a.preset, &a.config) {
        (Some(name), None) => (preset(name, &overrides)?, name.clone()),
        (None, Some(path)) => {
            let mut spec = ExperimentSpec::from_toml(&std::fs::read_to_string(path)?)?;
            gradleak::harness::presets::apply_overrides(&mut spec, &overrides);
            spec.validate()?;
            let name = spec.name.clone();
            (vec![spec], name)
        }
        _ => return Err(Error::Config("give either a preset name or --config".into())),
    };
    if a.dry_run {
        for s in &specs {
            println!("{}", s.to_toml()?);
        }
        return Ok(());
    }
    let out = out_dir(&a.out, root, &label);
    for spec in &specs {
        let dir = if specs.len() == 1 && a.config.is_some() { out.clone() } else { out.join(&spec.name) };
        eprintln!("running {} -> {}", spec.name, dir.display());
        let run = run_experiment(spec, &dir)?;
        println!("{}", spec.name);
        print_summary(&run.aggregate);
        for f in &run.manifest.failures {
            eprintln!("  failure (seed {}, epoch {:?}, batch {:?}): {}", f.seed, f.epoch, f.batch_size, f.error);
        }
    }
    Ok(())
}

fn cmd_dataset(c: &DatasetCommand) -> Result<()> {
    match c {
        DatasetCommand::Inspect(d) => {
            let source: DatasetSource = d.dataset.parse()?;
            let ds = load_dataset(&source, d.split_seed)?;
            let s = ds.shape();
            println!("name      {}", ds.name);
            println!("images    {} ({} train / {} test)", ds.len(), ds.train.len(), ds.test.len());
            println!("shape     {}x{}x{}", s.channels, s.height, s.width);
            println!("classes   {}", ds.classes);
            println!("encoding  {:?}", ds.encoding);
            let all: Vec<usize> = (0..ds.len()).collect();
            println!("per class {:?}", ds.class_counts(&all));
        }
        DatasetCommand::Convert(a) => {
            let ds = load_dataset(&a.data.dataset.parse()?, a.data.split_seed)?;
            match a.format {
                Format::Idx => {
                    let images = a.out.with_extension("images.idx");
                    let labels = a.out.with_extension("labels.idx");
                    write_idx(&ds, &images, &labels)?;
                    println!("wrote {} and {}", images.display(), labels.display());
                }
                Format::Cifar10 => write_cifar(&ds, &a.out, CifarVariant::Ten)?,
                Format::Cifar100 => write_cifar(&ds, &a.out, CifarVariant::Hundred)?,
                Format::Dir => write_image_dir(&ds, &a.out)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &cli.artifacts),
        Command::Attack(a) => cmd_attack(a, &cli.artifacts),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Reproduce(a) => cmd_reproduce(a, &cli.artifacts),
        Command::Dataset(c) => cmd_dataset(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
