use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::autodiff::{GradientCapture, Tensor};
use crate::defenses::{apply_defense, GradientDefense};
use crate::error::{Error, Result};
use crate::models::{compute_gradient, ForwardOptions, Mode, Model};

/// Fixed images drawn from the training split for attack studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSet {
    pub indices: Vec<usize>,
    #[serde(skip)]
    pub images: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl VictimSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        self.images.as_ref().expect("victim images are materialized on sampling")
    }
}

/// Draws `size` training images: first one per class (when `coverage`), then
/// uniformly from the rest. Deterministic in `seed`.
pub fn sample_victims(ds: &Dataset, size: usize, seed: u64, coverage: bool) -> Result<VictimSet> {
    if size > ds.train.len() {
        return Err(Error::usage(format!(
            "cannot draw {size} victims from a training split of {}",
            ds.train.len()
        )));
    }
    let present: Vec<usize> = ds
        .class_counts(&ds.train)
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| c)
        .collect();
    if coverage && size < present.len() {
        return Err(Error::usage(format!(
            "{size} victims cannot cover {} classes",
            present.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ds.train.clone();
    pool.shuffle(&mut rng);
    let mut chosen = Vec::with_capacity(size);
    if coverage {
        for &c in &present {
            let pos = pool.iter().position(|&i| ds.labels[i] == c).expect("class present");
            chosen.push(pool.remove(pos));
        }
    }
    chosen.extend(pool.into_iter().take(size - chosen.len()));
    chosen.sort_unstable();
    let (images, labels) = ds.subset(&chosen)?;
    Ok(VictimSet {
        indices: chosen,
        images: Some(images),
        labels,
    })
}

/// Simulates one training step on `images` and returns the (defended)
/// gradient. The model's parameters are not modified.
pub fn capture_victim_gradient(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    defense: &GradientDefense,
    include_kl: bool,
) -> Result<GradientCapture> {
    let capture = compute_gradient(model, images, labels, Mode::Train, &ForwardOptions::default(), include_kl)?;
    Ok(apply_defense(&capture, defense))
}
