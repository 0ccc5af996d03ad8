//! Dataset ingestion: CIFAR binary batches, IDX files, folders of class
//! subdirectories and a builtin synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{gather, ImageShape, LabeledView};

const CIFAR_PIXELS: usize = 3 * 32 * 32;
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelEncoding {
    /// Stored as `u8`, normalized by 255 on load.
    ByteRange,
    /// Generated directly in `[0, 1]`.
    UnitRange,
}

/// Images in unit range, `[N, C, H, W]`, with a disjoint train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub encoding: PixelEncoding,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, classes: usize, encoding: PixelEncoding) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::usage(format!(
                "dataset images {:?} do not pair with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::usage(format!("label {bad} outside {classes} classes")));
        }
        let n = labels.len();
        Ok(Self {
            name: name.into(),
            images,
            labels,
            classes,
            train: (0..n).collect(),
            test: Vec::new(),
            encoding,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape::new(s[1], s[2], s[3])
    }

    /// Single image `[C, H, W]`.
    pub fn image(&self, index: usize) -> Result<Tensor> {
        let s = self.shape();
        gather(&self.images, &[index])?.reshaped(&s.dims())
    }

    /// Stratified split: each class contributes `round(train_fraction · n_c)`
    /// of its (shuffled) members to the training side.
    pub fn with_split(mut self, train_fraction: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(&mut rng);
            let cut = (train_fraction * members.len() as f64).round() as usize;
            train.extend_from_slice(&members[..cut]);
            test.extend_from_slice(&members[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        self.train = train;
        self.test = test;
        self
    }

    /// Materialized `(images, labels)` for a set of indices.
    pub fn subset(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((gather(&self.images, idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

/// Owned split with a borrowable view for training.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn from(ds: &Dataset, idx: &[usize]) -> Result<Self> {
        let (images, labels) = ds.subset(idx)?;
        Ok(Self { images, labels })
    }

    pub fn view(&self) -> LabeledView<'_> {
        LabeledView {
            images: &self.images,
            labels: &self.labels,
        }
    }
}

/// Parameters of the builtin generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 16,
            size: 8,
            channels: 1,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Where a dataset comes from, parsed from strings such as
/// `synthetic:classes=4,per_class=64,size=8`, `cifar10:data/cifar-10-batches-bin`,
/// `cifar100:train.bin`, `idx:imgs.idx3,labels.idx1` or `dir:medical`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Cifar10 { path: PathBuf },
    Cifar100 { path: PathBuf },
    Idx { images: PathBuf, labels: PathBuf },
    Dir { path: PathBuf },
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (k, v) = part
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("expected key=value in `{part}`")))?;
                    let bad = || Error::Config(format!("bad value for `{k}` in `{s}`"));
                    match k {
                        "classes" => spec.classes = v.parse().map_err(|_| bad())?,
                        "per_class" => spec.per_class = v.parse().map_err(|_| bad())?,
                        "size" => spec.size = v.parse().map_err(|_| bad())?,
                        "channels" => spec.channels = v.parse().map_err(|_| bad())?,
                        "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                        "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                        _ => return Err(Error::Config(format!("unknown synthetic option `{k}`"))),
                    }
                }
                Ok(Self::Synthetic(spec))
            }
            "cifar10" | "cifar" => Ok(Self::Cifar10 { path: rest.into() }),
            "cifar100" => Ok(Self::Cifar100 { path: rest.into() }),
            "idx" => {
                let (i, l) = rest
                    .split_once(',')
                    .ok_or_else(|| Error::Config("idx source needs `idx:<images>,<labels>`".into()))?;
                Ok(Self::Idx {
                    images: i.into(),
                    labels: l.into(),
                })
            }
            "dir" => Ok(Self::Dir { path: rest.into() }),
            _ => Err(Error::Config(format!("unknown dataset source `{s}`"))),
        }
    }
}

/// Loads a dataset; sources without a native split get a stratified 80/20
/// split drawn with `split_seed`.
pub fn load_dataset(source: &DatasetSource, split_seed: u64) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(spec) => Ok(synthetic(spec)?.with_split(0.8, split_seed)),
        DatasetSource::Cifar10 { path } => load_cifar(path, CifarVariant::Ten, split_seed),
        DatasetSource::Cifar100 { path } => load_cifar(path, CifarVariant::Hundred, split_seed),
        DatasetSource::Idx { images, labels } => Ok(read_idx(images, labels)?.with_split(0.8, split_seed)),
        DatasetSource::Dir { path } => Ok(read_image_dir(path)?.with_split(0.8, split_seed)),
    }
}

// ---- synthetic -------------------------------------------------------------

/// Class-structured images: each class has its own pattern family
/// (horizontal stripes, vertical stripes, a blob, diagonal stripes, ...)
/// with per-image random phase, position, contrast and pixel noise.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.size < 2 || spec.channels == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive (size >= 2)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let plane = s * s;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        let family = c % 4;
        let variant = (c / 4) as f64;
        let freq = (1.0 + 0.5 * variant) * std::f64::consts::TAU / s as f64 * rng.random_range(1.2..2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (rng.random_range(0.25..0.75) * s as f64, rng.random_range(0.25..0.75) * s as f64);
        let radius = rng.random_range(0.15..0.3) * s as f64 * (1.0 + 0.3 * variant);
        let contrast = rng.random_range(0.5..1.0);
        let base = rng.random_range(0.2..0.5);
        for ch in 0..spec.channels {
            let tint = if spec.channels == 1 { 1.0 } else { 0.6 + 0.4 * ((ch + c) % spec.channels) as f64 / spec.channels as f64 };
            for y in 0..s {
                for x in 0..s {
                    let (fy, fx) = (y as f64, x as f64);
                    let pattern = match family {
                        0 => (freq * fy + phase).sin(),
                        1 => (freq * fx + phase).sin(),
                        2 => {
                            let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                            2.0 * (-d2 / (2.0 * radius * radius)).exp() - 1.0
                        }
                        _ => (freq * (fx + fy) / std::f64::consts::SQRT_2 + phase).sin(),
                    };
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise;
                    let v = base + 0.5 * contrast * tint * (pattern + 1.0) * (1.0 - base) + noise;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(vec![n, spec.channels, s, s], data)?;
    Dataset::new(
        format!("synthetic-{}c-{}px", spec.classes, s),
        images,
        labels,
        spec.classes,
        PixelEncoding::UnitRange,
    )
}

// ---- CIFAR -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// `label | 3072 pixels`
    Ten,
    /// `coarse | fine | 3072 pixels`; the fine label is used.
    Hundred,
}

impl CifarVariant {
    fn header(self) -> usize {
        match self {
            CifarVariant::Ten => 1,
            CifarVariant::Hundred => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::Ten => 10,
            CifarVariant::Hundred => 100,
        }
    }
}

/// Parses CIFAR binary records into `[N, 3, 32, 32]` unit-range images.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, file: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let record = variant.header() + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        let full = bytes.len() / record * record;
        return Err(Error::format(
            file,
            format!("truncated record at offset {full}: file length {} is not a multiple of {record}", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[variant.header() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::format(file, format!("label {label} at offset {} out of range", r * record)));
        }
        labels.push(label);
        pixels.extend(rec[variant.header()..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_files(dir: &Path, variant: CifarVariant) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().to_string();
        let is_train = match variant {
            CifarVariant::Ten => name.starts_with("data_batch") && name.ends_with(".bin"),
            CifarVariant::Hundred => name == "train.bin",
        };
        let is_test = matches!(name.as_str(), "test_batch.bin" | "test.bin");
        if is_train {
            train.push(e.path());
        } else if is_test {
            test.push(e.path());
        }
    }
    if train.is_empty() {
        return Err(Error::format(dir.display().to_string(), "no CIFAR training batch files found"));
    }
    Ok((train, test))
}

fn load_cifar(path: &Path, variant: CifarVariant, split_seed: u64) -> Result<Dataset> {
    let name = match variant {
        CifarVariant::Ten => "cifar10",
        CifarVariant::Hundred => "cifar100",
    };
    if path.is_file() {
        let bytes = fs::read(path)?;
        let (pixels, labels) = parse_cifar(&bytes, variant, &path.display().to_string())?;
        let n = labels.len();
        let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
        return Ok(Dataset::new(name, images, labels, variant.classes(), PixelEncoding::ByteRange)?.with_split(0.8, split_seed));
    }
    let (train_files, test_files) = cifar_files(path, variant)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut n_train = 0;
    for (i, f) in train_files.iter().chain(&test_files).enumerate() {
        let bytes = fs::read(f)?;
        let (p, l) = parse_cifar(&bytes, variant, &f.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
        if i + 1 == train_files.len() {
            n_train = labels.len();
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    let mut ds = Dataset::new(name, images, labels, variant.classes(), PixelEncoding::ByteRange)?;
    ds.train = (0..n_train).collect();
    ds.test = (n_train..n).collect();
    Ok(ds)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes every image as CIFAR records (colour images of 32x32 only).
pub fn write_cifar(ds: &Dataset, path: &Path, variant: CifarVariant) -> Result<()> {
    if ds.shape() != ImageShape::new(3, 32, 32) {
        return Err(Error::usage(format!("CIFAR records need 3x32x32 images, got {:?}", ds.shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * (variant.header() + CIFAR_PIXELS));
    for (i, &label) in ds.labels.iter().enumerate() {
        if variant == CifarVariant::Hundred {
            out.push(0);
        }
        out.push(label as u8);
        out.extend(ds.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS].iter().map(|&v| to_byte(v)));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---- IDX -------------------------------------------------------------------

fn read_idx_header(bytes: &[u8], file: &str, expect: u32) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::format(file, "missing IDX magic at offset 0"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expect {
        return Err(Error::format(file, format!("magic 0x{magic:08x} at offset 0, expected 0x{expect:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(file, format!("truncated dimension table at offset 4 ({ndim} dims)")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    if bytes.len() - header != expected {
        return Err(Error::format(
            file,
            format!("payload at offset {header} has {} bytes, dims {dims:?} need {expected}", bytes.len() - header),
        ));
    }
    Ok((dims, header))
}

/// Reads unsigned-byte IDX image (`[N, H, W]`) and label (`[N]`) files.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ifile = images.display().to_string();
    let lfile = labels.display().to_string();
    let ib = fs::read(images)?;
    let lb = fs::read(labels)?;
    let (idims, ih) = read_idx_header(&ib, &ifile, IDX_IMAGES)?;
    let (ldims, lh) = read_idx_header(&lb, &lfile, IDX_LABELS)?;
    if idims[0] != ldims[0] {
        return Err(Error::format(lfile, format!("{} labels for {} images", ldims[0], idims[0])));
    }
    let labels: Vec<usize> = lb[lh..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let pixels = ib[ih..].iter().map(|&b| b as f64 / 255.0).collect();
    let tensor = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], pixels)?;
    Dataset::new("idx", tensor, labels, classes, PixelEncoding::ByteRange)
}

/// Writes single-channel datasets as IDX image and label files.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let s = ds.shape();
    if s.channels != 1 {
        return Err(Error::usage("IDX export supports single-channel images only"));
    }
    let mut ib = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [ds.len(), s.height, s.width] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&v| to_byte(v)));
    let mut lb = IDX_LABELS.to_be_bytes().to_vec();
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images, ib)?;
    fs::write(labels, lb)?;
    Ok(())
}

// ---- image folders ---------------------------------------------------------

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// Reads `root/<class>/<image>`; classes are subdirectories in name order.
pub fn read_image_dir(root: &Path) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::format(root.display().to_string(), "no class subdirectories"));
    }
    let mut decoded = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| is_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(dir.display().to_string(), "empty class directory"));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| Error::format(f.display().to_string(), e.to_string()))?;
            decoded.push((label, f, img));
        }
    }
    let gray = decoded.iter().all(|(_, _, img)| !img.color().has_color());
    let (w, h) = (decoded[0].2.width() as usize, decoded[0].2.height() as usize);
    let channels = if gray { 1 } else { 3 };
    let mut pixels = Vec::with_capacity(decoded.len() * channels * w * h);
    let mut labels = Vec::with_capacity(decoded.len());
    for (label, f, img) in decoded {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::format(
                f.display().to_string(),
                format!("image is {}x{}, expected {w}x{h}", img.width(), img.height()),
            ));
        }
        if gray {
            pixels.extend(img.to_luma8().as_raw().iter().map(|&b| b as f64 / 255.0));
        } else {
            let rgb = img.to_rgb8();
            for c in 0..3 {
                pixels.extend(rgb.as_raw().iter().skip(c).step_by(3).map(|&b| b as f64 / 255.0));
            }
        }
        labels.push(label);
    }
    let n = labels.len();
    let name = root.file_name().map_or("dir".to_string(), |n| n.to_string_lossy().to_string());
    let tensor = Tensor::new(vec![n, channels, h, w], pixels)?;
    Dataset::new(name, tensor, labels, classes.len(), PixelEncoding::ByteRange)
}

/// Encodes a `[C, H, W]` unit-range image as an 8-bit grayscale or RGB image.
pub fn to_dynamic_image(img: &Tensor) -> Result<image::DynamicImage> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::usage(format!("expected [C, H, W], got {:?}", img.shape())));
    };
    let plane = h * w;
    match c {
        1 => {
            let raw = img.data().iter().map(|&v| to_byte(v)).collect();
            let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
            Ok(image::DynamicImage::ImageLuma8(buf))
        }
        3 => {
            let mut raw = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    raw.push(to_byte(img.data()[ch * plane + p]));
                }
            }
            let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
            Ok(image::DynamicImage::ImageRgb8(buf))
        }
        _ => Err(Error::Unsupported(format!("cannot encode {c}-channel images"))),
    }
}

/// Writes one PNG per image under `root/<class>/<index>.png`.
pub fn write_image_dir(ds: &Dataset, root: &Path) -> Result<()> {
    let width = ds.classes.to_string().len();
    for c in 0..ds.classes {
        fs::create_dir_all(root.join(format!("{c:0width$}")))?;
    }
    for i in 0..ds.len() {
        let path = root.join(format!("{:0width$}", ds.labels[i])).join(format!("{i:06}.png"));
        to_dynamic_image(&ds.image(i)?)?.save(&path)?;
    }
    Ok(())
}
