//! Perturbations applied to a gradient capture before the attacker sees it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientCapture;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    GaussianNoise { sigma: f64 },
    /// Zeroes the `prune_ratio` fraction of smallest-magnitude coordinates.
    Compression { prune_ratio: f64, per_layer: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientDefense {
    pub kind: DefenseKind,
    pub seed: u64,
}

impl Default for GradientDefense {
    fn default() -> Self {
        Self::none()
    }
}

impl GradientDefense {
    pub fn none() -> Self {
        Self {
            kind: DefenseKind::None,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            kind: DefenseKind::GaussianNoise { sigma },
            seed,
        })
    }

    pub fn compression(prune_ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&prune_ratio) {
            return Err(Error::Config(format!("prune ratio must lie in [0, 1), got {prune_ratio}")));
        }
        Ok(Self {
            kind: DefenseKind::Compression {
                prune_ratio,
                per_layer: false,
            },
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn per_layer(mut self) -> Self {
        if let DefenseKind::Compression { per_layer, .. } = &mut self.kind {
            *per_layer = true;
        }
        self
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, DefenseKind::None)
    }

    /// Applies the perturbation in place to a flat gradient vector.
    pub fn apply_flat(&self, values: &mut [f64], blocks: &[(usize, usize)]) {
        match self.kind {
            DefenseKind::None => {}
            DefenseKind::GaussianNoise { sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let normal = Normal::new(0.0, sigma).expect("validated sigma");
                for v in values.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            DefenseKind::Compression { prune_ratio, per_layer } => {
                if per_layer {
                    for &(offset, len) in blocks {
                        prune_smallest(&mut values[offset..offset + len], prune_ratio);
                    }
                } else {
                    prune_smallest(values, prune_ratio);
                }
            }
        }
    }
}

/// Zeroes `floor(ratio * n)` entries of smallest magnitude; ties go to the lower index.
pub fn prune_smallest(values: &mut [f64], ratio: f64) {
    let count = (ratio * values.len() as f64).floor() as usize;
    if count == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    for &i in &order[..count] {
        values[i] = 0.0;
    }
}

/// Returns a perturbed copy of `capture`; the layout is never altered.
pub fn apply_defense(capture: &GradientCapture, defense: &GradientDefense) -> GradientCapture {
    let mut out = capture.clone();
    let blocks: Vec<_> = capture.layout.iter().map(|e| (e.offset, e.len)).collect();
    defense.apply_flat(&mut out.values, &blocks);
    out
}

impl fmt::Display for GradientDefense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DefenseKind::None => write!(f, "none"),
            DefenseKind::GaussianNoise { sigma } => write!(f, "ng:{sigma:e}"),
            DefenseKind::Compression { prune_ratio, per_layer } => {
                write!(f, "gc:{prune_ratio:.2}")?;
                if per_layer {
                    write!(f, ":layer")?;
                }
                Ok(())
            }
        }
    }
}

/// Parses `none`, `ng:<sigma>`, `gc:<ratio>` and `gc:<ratio>:layer`.
impl FromStr for GradientDefense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unrecognized defense `{s}`"));
        if s == "none" {
            return Ok(Self::none());
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "ng" => Self::gaussian(rest.parse().map_err(|_| bad())?, 0),
            "gc" => {
                let (ratio, layer) = match rest.split_once(':') {
                    Some((r, "layer")) => (r, true),
                    Some(_) => return Err(bad()),
                    None => (rest, false),
                };
                let d = Self::compression(ratio.parse().map_err(|_| bad())?)?;
                Ok(if layer { d.per_layer() } else { d })
            }
            _ => Err(bad()),
        }
    }
}
