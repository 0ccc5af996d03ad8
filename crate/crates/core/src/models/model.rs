use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::precode::{precode_loss, BlockStats};
use super::spec::{LayerSpec, ModelSpec};
use crate::autodiff::{cross_entropy, ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Attack,
}

/// Source of the bottleneck noise for one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum NoiseOverride {
    /// Fresh draws from each block's own stream.
    #[default]
    Sample,
    /// ε = 0: the deterministic path through μ.
    Zero,
    /// Replays previously recorded ε, one tensor per block.
    Fixed(Vec<Tensor>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    pub noise: NoiseOverride,
}

impl ForwardOptions {
    pub fn zero_noise() -> Self {
        Self {
            noise: NoiseOverride::Zero,
        }
    }

    pub fn fixed_noise(noise: Vec<Tensor>) -> Self {
        Self {
            noise: NoiseOverride::Fixed(noise),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub blocks: Vec<BlockStats>,
    /// The ε drawn by each bottleneck, in block order.
    pub noise: Vec<Tensor>,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        w: ParamId,
        b: ParamId,
    },
    Conv {
        w: ParamId,
        b: ParamId,
        geom: ConvGeometry,
    },
    Relu,
    Sigmoid,
    Flatten,
    Precode {
        enc_w: ParamId,
        enc_b: ParamId,
        dec_w: ParamId,
        dec_b: ParamId,
        k: usize,
        beta: f64,
        block: usize,
    },
}

/// Independent noise streams for one bottleneck.
#[derive(Debug, Clone)]
struct NoiseStreams {
    train: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl NoiseStreams {
    fn new(seed: u64, block: usize) -> Self {
        let mut train = ChaCha8Rng::seed_from_u64(seed);
        train.set_stream(2 * block as u64 + 1);
        let mut eval = ChaCha8Rng::seed_from_u64(seed);
        eval.set_stream(2 * block as u64 + 2);
        Self { train, eval }
    }
}

/// A built model: parameters in definition order plus per-bottleneck RNGs.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    layers: Vec<Layer>,
    streams: Vec<NoiseStreams>,
}

#[derive(Debug, Clone)]
enum Shape {
    Image(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn width(&self) -> usize {
        match *self {
            Shape::Image(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn pair_error(spec: &ModelSpec, index: usize, detail: &str) -> Error {
    let prev = if index == 0 {
        "input".to_string()
    } else {
        format!("layer {} ({})", index - 1, spec.layers[index - 1].kind())
    };
    Error::Build(format!(
        "{prev} -> layer {index} ({}): {detail}",
        spec.layers[index].kind()
    ))
}

impl Model {
    /// Builds a model with uniform `±1/sqrt(fan_in)` initialization.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let input = spec.input;
        if input.numel() == 0 || spec.classes == 0 {
            return Err(Error::Build("input and class count must be positive".into()));
        }
        let mut shape = Shape::Image(input.channels, input.height, input.width);
        let mut blocks = 0;
        let mut saw_output = false;
        for (i, layer) in spec.layers.iter().enumerate() {
            if saw_output {
                return Err(pair_error(spec, i, "no layer may follow the output layer"));
            }
            match *layer {
                LayerSpec::Dense { units } => {
                    let Shape::Flat(n) = shape else {
                        return Err(pair_error(spec, i, "dense expects a flat input; add a flatten layer"));
                    };
                    if units == 0 {
                        return Err(pair_error(spec, i, "dense needs at least one unit"));
                    }
                    let w = params.add(format!("layer{i}.weight"), uniform_init(&mut rng, &[n, units], n));
                    let b = params.add(format!("layer{i}.bias"), uniform_init(&mut rng, &[units], n));
                    layers.push(Layer::Dense { w, b });
                    shape = Shape::Flat(units);
                }
                LayerSpec::SoftmaxOutput => {
                    let Shape::Flat(n) = shape else {
                        return Err(pair_error(spec, i, "output layer expects a flat input"));
                    };
                    let c = spec.classes;
                    let w = params.add(format!("layer{i}.weight"), uniform_init(&mut rng, &[n, c], n));
                    let b = params.add(format!("layer{i}.bias"), uniform_init(&mut rng, &[c], n));
                    layers.push(Layer::Dense { w, b });
                    shape = Shape::Flat(c);
                    saw_output = true;
                }
                LayerSpec::Conv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Shape::Image(c, h, w_) = shape else {
                        return Err(pair_error(spec, i, "conv2d expects an image-shaped input"));
                    };
                    if channels == 0 || kernel == 0 || stride == 0 {
                        return Err(pair_error(spec, i, "conv2d sizes must be positive"));
                    }
                    if h + 2 * padding < kernel || w_ + 2 * padding < kernel {
                        return Err(pair_error(spec, i, "kernel larger than padded input"));
                    }
                    let fan_in = c * kernel * kernel;
                    let w = params.add(
                        format!("layer{i}.weight"),
                        uniform_init(&mut rng, &[channels, c, kernel, kernel], fan_in),
                    );
                    let b = params.add(format!("layer{i}.bias"), uniform_init(&mut rng, &[channels], fan_in));
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w_ + 2 * padding - kernel) / stride + 1;
                    layers.push(Layer::Conv {
                        w,
                        b,
                        geom: ConvGeometry { stride, padding },
                    });
                    shape = Shape::Image(channels, oh, ow);
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::Sigmoid => layers.push(Layer::Sigmoid),
                LayerSpec::Flatten => {
                    layers.push(Layer::Flatten);
                    shape = Shape::Flat(shape.width());
                }
                LayerSpec::Precode { k, beta } => {
                    if k == 0 || !(beta >= 0.0) {
                        return Err(pair_error(spec, i, "precode needs k > 0 and beta >= 0"));
                    }
                    let z = shape.width();
                    let enc_w = params.add(format!("layer{i}.encoder.weight"), uniform_init(&mut rng, &[z, 2 * k], z));
                    let enc_b = params.add(format!("layer{i}.encoder.bias"), uniform_init(&mut rng, &[2 * k], z));
                    let dec_w = params.add(format!("layer{i}.decoder.weight"), uniform_init(&mut rng, &[k, z], k));
                    let dec_b = params.add(format!("layer{i}.decoder.bias"), uniform_init(&mut rng, &[z], k));
                    layers.push(Layer::Precode {
                        enc_w,
                        enc_b,
                        dec_w,
                        dec_b,
                        k,
                        beta,
                        block: blocks,
                    });
                    blocks += 1;
                }
            }
        }
        if !saw_output {
            return Err(Error::Build("model has no softmax output layer".into()));
        }
        let streams = (0..blocks).map(|b| NoiseStreams::new(seed, b)).collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            layers,
            streams,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.streams.len()
    }

    /// Restarts every bottleneck noise stream from `seed`.
    pub fn reseed_noise(&mut self, seed: u64) {
        for (b, s) in self.streams.iter_mut().enumerate() {
            *s = NoiseStreams::new(seed, b);
        }
    }

    /// Name of the output layer's weight parameter.
    pub fn output_weight(&self) -> &str {
        let id = self
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { w, .. } => Some(*w),
                _ => None,
            })
            .expect("built models end in a dense output layer");
        &self.params.get(id).name
    }

    /// Runs the model on `x: [N, C, H, W]` with parameters bound as `params`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        mode: Mode,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let xs = g.shape(x).to_vec();
        let input = self.spec.input;
        if xs.len() != 4 || xs[1..] != input.dims() {
            return Err(Error::usage(format!(
                "input of shape {xs:?} does not match model input {:?}",
                input.dims()
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::usage("bound parameter count differs from the model"));
        }
        if let NoiseOverride::Fixed(eps) = &opts.noise {
            if eps.len() != self.streams.len() {
                return Err(Error::usage("fixed noise must supply one tensor per bottleneck"));
            }
        }
        let batch = xs[0];
        let mut h = x;
        let mut blocks = Vec::new();
        let mut noise = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { w, b } => {
                    let y = g.matmul(h, params[w.0])?;
                    g.add_bias(y, params[b.0], 1)?
                }
                Layer::Conv { w, b, geom } => {
                    let y = g.conv2d(h, params[w.0], geom)?;
                    g.add_bias(y, params[b.0], 1)?
                }
                Layer::Relu => g.relu(h)?,
                Layer::Sigmoid => g.sigmoid(h)?,
                Layer::Flatten => {
                    let n = g.value(h).len() / batch;
                    g.reshape(h, &[batch, n])?
                }
                Layer::Precode {
                    enc_w,
                    enc_b,
                    dec_w,
                    dec_b,
                    k,
                    beta,
                    block,
                } => {
                    let in_shape = g.shape(h).to_vec();
                    let z_dim = g.value(h).len() / batch;
                    let z = if in_shape.len() == 2 { h } else { g.reshape(h, &[batch, z_dim])? };
                    let enc = g.matmul(z, params[enc_w.0])?;
                    let enc = g.add_bias(enc, params[enc_b.0], 1)?;
                    let mu = g.slice_axis(enc, 1, 0, k)?;
                    let logvar = g.slice_axis(enc, 1, k, k)?;
                    let sigma = g.scale(logvar, 0.5)?;
                    let sigma = g.exp(sigma)?;
                    let eps = match &opts.noise {
                        NoiseOverride::Sample => {
                            let rng = match mode {
                                Mode::Eval => &mut self.streams[block].eval,
                                Mode::Train | Mode::Attack => &mut self.streams[block].train,
                            };
                            let data = (0..batch * k).map(|_| StandardNormal.sample(rng)).collect();
                            Tensor::new(vec![batch, k], data)?
                        }
                        NoiseOverride::Zero => Tensor::zeros(&[batch, k]),
                        NoiseOverride::Fixed(all) => {
                            let e = all[block].clone();
                            if e.shape() != [batch, k] {
                                return Err(Error::usage(format!(
                                    "fixed noise for block {block} has shape {:?}, expected {:?}",
                                    e.shape(),
                                    [batch, k]
                                )));
                            }
                            e
                        }
                    };
                    let eps_var = g.constant(eps.clone());
                    noise.push(eps);
                    let spread = g.mul(sigma, eps_var)?;
                    let sample = g.add(mu, spread)?;
                    let dec = g.matmul(sample, params[dec_w.0])?;
                    let dec = g.add_bias(dec, params[dec_b.0], 1)?;
                    blocks.push(BlockStats { mu, sigma, beta });
                    if in_shape.len() == 2 {
                        dec
                    } else {
                        g.reshape(dec, &in_shape)?
                    }
                }
            };
        }
        Ok(ForwardOutput {
            logits: h,
            blocks,
            noise,
        })
    }

    /// Task loss plus, when `include_kl`, the weighted KL terms of every bottleneck.
    pub fn loss(
        &mut self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        labels: &[usize],
        mode: Mode,
        opts: &ForwardOptions,
        include_kl: bool,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, params, x, mode, opts)?;
        let task = cross_entropy(g, out.logits, labels)?;
        let loss = if include_kl && !out.blocks.is_empty() {
            precode_loss(g, task, &out.blocks)?
        } else {
            task
        };
        Ok((loss, out))
    }

    /// Predicted class per row of `images: [N, C, H, W]`.
    pub fn predict(&mut self, images: &Tensor, mode: Mode, opts: &ForwardOptions) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &params, x, mode, opts)?;
        let logits = g.value(out.logits);
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Stacks `[C, H, W]` images into one `[N, C, H, W]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::usage("cannot stack zero images"))?;
    let dims = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != dims.as_slice() {
            return Err(Error::Shape {
                op: "stack_images",
                shapes: vec![dims.clone(), img.shape().to_vec()],
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&dims);
    Tensor::new(shape, data)
}
