//! Datasets, victim sampling, experiment orchestration and rendering.

pub mod dataset;
pub mod experiment;
pub mod presets;
pub mod render;
pub mod victims;

pub use dataset::{load_dataset, Dataset, DatasetSource, PixelEncoding, SplitData, SyntheticSpec};
pub use experiment::{
    attack_checkpoint, read_rows, run_experiment, AttackJob, summarize_rows, AggregateRow, ExperimentSpec, Failure, ImageRow, Manifest,
    RunArtifacts, SeedLedger, TrainSettings, AGGREGATE_CSV, CONFIG_TOML, MANIFEST_JSON, PER_IMAGE_CSV,
};
pub use presets::{preset, run_preset, PresetOverrides, PRESETS};
pub use render::{grid_image, render_grid};
pub use victims::{capture_victim_gradient, sample_victims, VictimSet};
