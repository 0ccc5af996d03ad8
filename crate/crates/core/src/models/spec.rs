use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-first image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// `[batch, C, H, W]`
    pub fn batch_dims(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    /// Variational bottleneck of width `k` with KL weight `beta`.
    Precode {
        k: usize,
        beta: f64,
    },
    /// Dense layer producing class logits; softmax is applied by the loss.
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Precode { .. } => "precode",
            LayerSpec::SoftmaxOutput => "softmax_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: ImageShape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn precode_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Precode { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_precode(&self) -> bool {
        !self.precode_positions().is_empty()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Precode { beta, .. } => Some(*beta),
                _ => None,
            })
            .collect()
    }

    /// MLP with `hidden` dense+ReLU blocks of `width` units.
    pub fn mlp(name: &str, input: ImageShape, classes: usize, width: usize, hidden: usize) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        for _ in 0..hidden {
            layers.push(LayerSpec::Dense { units: width });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::SoftmaxOutput);
        Self {
            name: name.to_string(),
            input,
            classes,
            layers,
        }
    }

    pub fn smlp(input: ImageShape, classes: usize, width: usize) -> Self {
        Self::mlp("smlp", input, classes, width, 2)
    }

    pub fn dmlp(input: ImageShape, classes: usize, width: usize) -> Self {
        Self::mlp("dmlp", input, classes, width, 4)
    }

    /// LeNet-style stack: four 5x5 sigmoid convolutions (strides 2, 2, 1, 1,
    /// padding 2) followed by a single dense classifier.
    pub fn convnet(input: ImageShape, classes: usize, channels: usize) -> Self {
        let mut layers = Vec::new();
        for stride in [2, 2, 1, 1] {
            layers.push(LayerSpec::Conv2d {
                channels,
                kernel: 5,
                stride,
                padding: 2,
            });
            layers.push(LayerSpec::Sigmoid);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::SoftmaxOutput);
        Self {
            name: "convnet".to_string(),
            input,
            classes,
            layers,
        }
    }

    /// Indices just past each feature-extracting block (after its activation).
    fn feature_block_ends(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu | LayerSpec::Sigmoid))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Inserts a bottleneck after feature block `position` (1-based). `None`
    /// places it directly before the output layer.
    pub fn with_precode(mut self, k: usize, beta: f64, position: Option<usize>) -> Result<Self> {
        let at = match position {
            None => self
                .layers
                .iter()
                .position(|l| matches!(l, LayerSpec::SoftmaxOutput))
                .ok_or_else(|| Error::Build("model has no output layer".into()))?,
            Some(p) => {
                let ends = self.feature_block_ends();
                if p == 0 || p > ends.len() {
                    return Err(Error::Build(format!(
                        "precode position {p} outside 1..={} feature blocks",
                        ends.len()
                    )));
                }
                ends[p - 1]
            }
        };
        self.layers.insert(at, LayerSpec::Precode { k, beta });
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Smlp,
    Dmlp,
    Convnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecodeSpec {
    pub k: usize,
    pub beta: f64,
    pub position: Option<usize>,
}

/// Named architecture plus optional bottlenecks, e.g. `smlp`, `dmlp@1024`,
/// `convnet+precode(16,0.001)`, `smlp+precode(k=32,beta=0.01,position=1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub arch: Arch,
    /// Hidden width for MLPs, channel count for the ConvNet.
    pub width: usize,
    pub precode: Vec<PrecodeSpec>,
}

impl ModelPreset {
    pub fn new(arch: Arch) -> Self {
        let width = match arch {
            Arch::Smlp | Arch::Dmlp => 64,
            Arch::Convnet => 12,
        };
        Self {
            arch,
            width,
            precode: Vec::new(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_precode(mut self, k: usize, beta: f64) -> Self {
        self.precode.push(PrecodeSpec { k, beta, position: None });
        self
    }

    pub fn model_spec(&self, input: ImageShape, classes: usize) -> Result<ModelSpec> {
        let mut spec = match self.arch {
            Arch::Smlp => ModelSpec::smlp(input, classes, self.width),
            Arch::Dmlp => ModelSpec::dmlp(input, classes, self.width),
            Arch::Convnet => ModelSpec::convnet(input, classes, self.width),
        };
        // Insert from the deepest position first so earlier indices stay valid.
        let mut blocks = self.precode.clone();
        blocks.sort_by_key(|b| std::cmp::Reverse(b.position.unwrap_or(usize::MAX)));
        for b in blocks {
            spec = spec.with_precode(b.k, b.beta, b.position)?;
        }
        if !self.precode.is_empty() {
            spec.name.push_str("+precode");
        }
        Ok(spec)
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arch = match self.arch {
            Arch::Smlp => "smlp",
            Arch::Dmlp => "dmlp",
            Arch::Convnet => "convnet",
        };
        write!(f, "{arch}@{}", self.width)?;
        for p in &self.precode {
            write!(f, "+precode(k={},beta={}", p.k, p.beta)?;
            if let Some(pos) = p.position {
                write!(f, ",position={pos}")?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

fn parse_precode(args: &str) -> Result<PrecodeSpec> {
    let bad = || Error::Config(format!("malformed precode arguments `{args}`"));
    let mut spec = PrecodeSpec {
        k: 256,
        beta: 1e-3,
        position: None,
    };
    for (i, part) in args.split(',').map(str::trim).filter(|p| !p.is_empty()).enumerate() {
        let (key, value) = match part.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => (["k", "beta", "position"].get(i).copied().ok_or_else(bad)?, part),
        };
        match key {
            "k" => spec.k = value.parse().map_err(|_| bad())?,
            "beta" => spec.beta = value.parse().map_err(|_| bad())?,
            "position" => spec.position = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    if spec.k == 0 || spec.beta < 0.0 {
        return Err(bad());
    }
    Ok(spec)
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or_default();
        let (name, width) = match head.split_once('@') {
            Some((n, w)) => (
                n,
                Some(
                    w.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad width in `{head}`")))?,
                ),
            ),
            None => (head, None),
        };
        let arch = match name {
            "smlp" => Arch::Smlp,
            "dmlp" => Arch::Dmlp,
            "convnet" | "lenet" => Arch::Convnet,
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        let mut preset = ModelPreset::new(arch);
        if let Some(w) = width {
            preset.width = w;
        }
        for part in parts {
            let args = part
                .strip_prefix("precode")
                .ok_or_else(|| Error::Config(format!("unknown model extension `{part}`")))?;
            let args = if args.is_empty() {
                ""
            } else {
                args.strip_prefix('(')
                    .and_then(|a| a.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("malformed extension `{part}`")))?
            };
            preset.precode.push(parse_precode(args)?);
        }
        Ok(preset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_strings_round_trip() {
        for s in ["smlp", "dmlp@1024", "convnet+precode(16,0.001)", "smlp+precode(k=8,beta=0.1,position=1)"] {
            let p: ModelPreset = s.parse().unwrap();
            let again: ModelPreset = p.to_string().parse().unwrap();
            assert_eq!(p, again);
        }
        let p: ModelPreset = "smlp+precode(16,0.001)".parse().unwrap();
        assert_eq!(p.width, 64);
        assert_eq!(p.precode[0].k, 16);
        assert!("resnet".parse::<ModelPreset>().is_err());
        assert!("smlp+dropout".parse::<ModelPreset>().is_err());
    }

    #[test]
    fn precode_goes_before_output_by_default() {
        let spec = ModelSpec::smlp(ImageShape::new(1, 8, 8), 4, 64)
            .with_precode(16, 1e-3, None)
            .unwrap();
        let n = spec.layers.len();
        assert!(matches!(spec.layers[n - 2], LayerSpec::Precode { k: 16, .. }));
        assert_eq!(spec.precode_positions(), vec![n - 2]);

        let early = ModelSpec::dmlp(ImageShape::new(1, 8, 8), 4, 64)
            .with_precode(16, 1e-3, Some(1))
            .unwrap();
        assert_eq!(early.precode_positions(), vec![3]);
        assert!(ModelSpec::smlp(ImageShape::new(1, 8, 8), 4, 64)
            .with_precode(16, 1e-3, Some(3))
            .is_err());
    }
}
