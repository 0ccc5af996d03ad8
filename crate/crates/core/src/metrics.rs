//! Reconstruction quality: MSE, PSNR, SSIM and attack success rate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SUCCESS_THRESHOLD: f64 = 0.6;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak used in the PSNR numerator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrPeak {
    /// Maximum pixel of the original image.
    #[default]
    OriginalMax,
    /// The dynamic range `L`.
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// Whole-image moments per channel.
    #[default]
    Global,
    /// Mean over uniform 8x8 windows at stride 4.
    Windowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Dynamic range `L` of the pixel encoding.
    pub range: f64,
    pub peak: PsnrPeak,
    pub ssim: SsimMode,
    /// Clamp reconstructions to `[0, L]` before scoring.
    pub clamp: bool,
    pub threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            range: 1.0,
            peak: PsnrPeak::OriginalMax,
            ssim: SsimMode::Global,
            clamp: true,
            threshold: SUCCESS_THRESHOLD,
        }
    }
}

fn check_pair(x: &Tensor, y: &Tensor, op: &'static str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op,
            shapes: vec![x.shape().to_vec(), y.shape().to_vec()],
        });
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y, "mse")?;
    let n = x.len() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10·log10(peak² / MSE)`; `+inf` when the images are identical.
pub fn psnr(x: &Tensor, y: &Tensor, peak: PsnrPeak, range: f64) -> Result<f64> {
    let err = mse(x, y)?;
    let p = match peak {
        PsnrPeak::OriginalMax => x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        PsnrPeak::Range => range,
    };
    if p == 0.0 {
        return Err(Error::UndefinedMetric("PSNR peak is zero".into()));
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p * p / err).log10())
}

/// Splits an image into channel planes: `[C, H, W]` yields C planes, `[H, W]` one.
fn planes(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        ref s => Err(Error::usage(format!("expected an image [C, H, W], got {s:?}"))),
    }
}

fn ssim_moments(a: &[f64], b: &[f64], range: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Global-statistics SSIM averaged over channels.
pub fn ssim(x: &Tensor, y: &Tensor, range: f64) -> Result<f64> {
    check_pair(x, y, "ssim")?;
    let (c, h, w) = planes(x)?;
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|i| ssim_moments(&x.data()[i * plane..(i + 1) * plane], &y.data()[i * plane..(i + 1) * plane], range))
        .sum();
    Ok(total / c as f64)
}

/// SSIM averaged over uniform 8x8 windows at stride 4 (whole image if smaller).
pub fn ssim_windowed(x: &Tensor, y: &Tensor, range: f64) -> Result<f64> {
    check_pair(x, y, "ssim")?;
    let (c, h, w) = planes(x)?;
    let (wh, ww) = (h.min(8), w.min(8));
    let mut total = 0.0;
    let mut count = 0usize;
    let (mut pa, mut pb) = (Vec::with_capacity(64), Vec::with_capacity(64));
    for ch in 0..c {
        let base = ch * h * w;
        for top in (0..=h - wh).step_by(4) {
            for left in (0..=w - ww).step_by(4) {
                pa.clear();
                pb.clear();
                for r in top..top + wh {
                    let row = base + r * w + left;
                    pa.extend_from_slice(&x.data()[row..row + ww]);
                    pb.extend_from_slice(&y.data()[row..row + ww]);
                }
                total += ssim_moments(&pa, &pb, range);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn clamp_image(x: &Tensor, range: f64) -> Tensor {
    x.map(|v| v.clamp(0.0, range))
}

pub fn attack_success_rate(ssims: &[f64], threshold: f64) -> Result<f64> {
    if ssims.is_empty() {
        return Err(Error::usage("attack success rate of an empty report"));
    }
    Ok(ssims.iter().filter(|&&s| s >= threshold).count() as f64 / ssims.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn success(&self, threshold: f64) -> bool {
        self.ssim >= threshold
    }
}

/// Scores one reconstruction against its original.
pub fn score(original: &Tensor, reconstructed: &Tensor, opts: &MetricOptions) -> Result<ImageMetrics> {
    let rec = if opts.clamp {
        clamp_image(reconstructed, opts.range)
    } else {
        reconstructed.clone()
    };
    let ssim = match opts.ssim {
        SsimMode::Global => ssim(original, &rec, opts.range)?,
        SsimMode::Windowed => ssim_windowed(original, &rec, opts.range)?,
    };
    Ok(ImageMetrics {
        mse: mse(original, &rec)?,
        psnr: psnr(original, &rec, opts.peak, opts.range)?,
        ssim,
    })
}

/// Greedy one-to-one matching of reconstructions to originals by SSIM.
/// Returns, for each original, the index of its assigned reconstruction.
pub fn match_reconstructions(originals: &[Tensor], reconstructions: &[Tensor], opts: &MetricOptions) -> Result<Vec<usize>> {
    if originals.len() != reconstructions.len() {
        return Err(Error::usage("originals and reconstructions differ in count"));
    }
    let n = originals.len();
    let mut pairs = Vec::with_capacity(n * n);
    for (i, o) in originals.iter().enumerate() {
        for (j, r) in reconstructions.iter().enumerate() {
            pairs.push((score(o, r, opts)?.ssim, i, j));
        }
    }
    // Highest SSIM first; ties resolved by (original, reconstruction) index.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    for (_, i, j) in pairs {
        if assigned[i] == usize::MAX && !taken[j] {
            assigned[i] = j;
            taken[j] = true;
        }
    }
    Ok(assigned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub asr: f64,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn new(per_image: Vec<ImageMetrics>, threshold: f64) -> Result<Self> {
        let ssims: Vec<f64> = per_image.iter().map(|m| m.ssim).collect();
        let asr = attack_success_rate(&ssims, threshold)?;
        Ok(Self {
            per_image,
            asr,
            threshold,
        })
    }

    pub fn mean(&self) -> ImageMetrics {
        let n = self.per_image.len() as f64;
        let sum = |f: fn(&ImageMetrics) -> f64| self.per_image.iter().map(f).sum::<f64>() / n;
        ImageMetrics {
            mse: sum(|m| m.mse),
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
        }
    }

    /// Writes `image_id,mse,psnr,ssim,success` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "mse", "psnr", "ssim", "success"])?;
        for (i, m) in self.per_image.iter().enumerate() {
            w.write_record([
                i.to_string(),
                m.mse.to_string(),
                m.psnr.to_string(),
                m.ssim.to_string(),
                u8::from(m.success(self.threshold)).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn windowed_equals_global_on_a_single_window() {
        let a = img(8, 8, (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect());
        let b = img(8, 8, (0..64).map(|i| (i as f64 * 0.11).cos().abs()).collect());
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim_windowed(&a, &b, 1.0).unwrap()).abs() < 1e-15);
        let big = img(16, 16, (0..256).map(|i| (i % 7) as f64 / 7.0).collect());
        assert!((ssim_windowed(&big, &big, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamping_before_scoring() {
        let x = img(1, 2, vec![0.0, 1.0]);
        let y = img(1, 2, vec![-3.0, 4.0]);
        let clamped = score(&x, &y, &MetricOptions::default()).unwrap();
        assert_eq!(clamped.mse, 0.0);
        let raw = score(&x, &y, &MetricOptions { clamp: false, ..Default::default() }).unwrap();
        assert_eq!(raw.mse, 9.0);
    }

    #[test]
    fn greedy_matching_recovers_a_permutation() {
        let a = img(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let b = img(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let c = img(2, 2, vec![0.2, 0.2, 0.9, 0.9]);
        let originals = vec![a.clone(), b.clone(), c.clone()];
        let recs = vec![c, a, b];
        let m = match_reconstructions(&originals, &recs, &MetricOptions::default()).unwrap();
        assert_eq!(m, vec![1, 2, 0]);
    }

    #[test]
    fn csv_rows() {
        let r = MetricsReport::new(
            vec![
                ImageMetrics { mse: 0.0, psnr: f64::INFINITY, ssim: 1.0 },
                ImageMetrics { mse: 0.5, psnr: 3.0, ssim: 0.1 },
            ],
            0.6,
        )
        .unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "image_id,mse,psnr,ssim,success\n0,0,inf,1,1\n1,0.5,3,0.1,0\n");
        assert_eq!(r.asr, 0.5);
    }
}
