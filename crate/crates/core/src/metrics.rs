//! Image quality metrics: MAE, MSE, PSNR, SSIM and the spectral angle
//! mapper.
//!
//! The metric functions take images whose values already live in `[0, L]`.
//! [`evaluate_pair`] takes `[0, 1]` images and rescales them by 255 first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Peak value of an 8-bit image.
pub const PEAK: f64 = 255.0;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn paired<'a, T: Element>(op: &'static str, x: &'a Tensor<T>, y: &'a Tensor<T>) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument(format!("{op} of empty images")));
    }
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a.to_f64_lossy(), b.to_f64_lossy())))
}

pub fn mae<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let n = x.len() as f64;
    Ok(paired("mae", x, y)?.map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let n = x.len() as f64;
    Ok(paired("mse", x, y)?.map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10 · log₁₀(L² / MSE)`; `+∞` for identical images.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    /// One set of statistics over the whole image (all pixels and bands).
    #[default]
    Global,
    /// 11×11 Gaussian window (σ = 1.5), valid positions, per band, then
    /// averaged over bands.
    Windowed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: K1,
            k2: K2,
            peak: PEAK,
        }
    }
}

impl SsimParams {
    fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }
    fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }

    fn formula(&self, mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
        let (c1, c2) = (self.c1(), self.c2());
        ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    }
}

pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, mode: SsimMode, params: SsimParams) -> Result<f64> {
    match mode {
        SsimMode::Global => ssim_global(x, y, params),
        SsimMode::Windowed => ssim_windowed(x, y, params),
    }
}

fn ssim_global<T: Element>(x: &Tensor<T>, y: &Tensor<T>, params: SsimParams) -> Result<f64> {
    let n = x.len() as f64;
    let (sx, sy) = paired("ssim", x, y)?.fold((0.0, 0.0), |(sx, sy), (a, b)| (sx + a, sy + b));
    let (mx, my) = (sx / n, sy / n);
    let (vx, vy, cov) = paired("ssim", x, y)?.fold((0.0, 0.0, 0.0), |(vx, vy, c), (a, b)| {
        let (da, db) = (a - mx, b - my);
        (vx + da * da, vy + db * db, c + da * db)
    });
    Ok(params.formula(mx, my, vx / n, vy / n, cov / n))
}

fn gaussian_window() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (total * total));
        }
    }
    w
}

fn ssim_windowed<T: Element>(x: &Tensor<T>, y: &Tensor<T>, params: SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (h, w, c) = x.hwc()?;
    if h < WINDOW || w < WINDOW {
        return Err(Error::InvalidArgument(format!(
            "windowed SSIM needs at least {WINDOW}×{WINDOW} pixels, got {h}×{w}"
        )));
    }
    let win = gaussian_window();
    let xs = x.to_f64_vec();
    let ys = y.to_f64_vec();
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut band_total = 0.0;
    for band in 0..c {
        let mut total = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..WINDOW {
                    for dx in 0..WINDOW {
                        let wgt = win[dy * WINDOW + dx];
                        let i = ((oy + dy) * w + ox + dx) * c + band;
                        let (a, b) = (xs[i], ys[i]);
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                total += params.formula(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
            }
        }
        band_total += total / (oh * ow) as f64;
    }
    Ok(band_total / c as f64)
}

/// Mean spectral angle in degrees, plus the number of pixels skipped
/// because either band vector had zero norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralAngle {
    pub degrees: f64,
    pub skipped: usize,
}

pub fn sam<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<SpectralAngle> {
    if x.shape() != y.shape() {
        return Err(Error::shape("sam", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (_, _, c) = x.hwc()?;
    if c == 0 {
        return Err(Error::InvalidArgument("sam needs at least one band".into()));
    }
    let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    for (px, py) in x.data().chunks(c).zip(y.data().chunks(c)) {
        let norm = |p: &[T]| p.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let (nx, ny) = (norm(px), norm(py));
        if nx == 0.0 || ny == 0.0 {
            skipped += 1;
            continue;
        }
        // Half-angle form: exact zero for parallel vectors, stable near 0 and π.
        let (mut diff, mut sum) = (0.0, 0.0);
        for (a, b) in px.iter().zip(py) {
            let (a, b) = (a.to_f64_lossy() / nx, b.to_f64_lossy() / ny);
            diff += (a - b).powi(2);
            sum += (a + b).powi(2);
        }
        total += (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidArgument("sam: every pixel has a zero-norm band vector".into()));
    }
    Ok(SpectralAngle {
        degrees: total / counted as f64,
        skipped,
    })
}

/// Metrics for one prediction/ground-truth pair, on the 0–255 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub mae: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    pub sam_skipped: usize,
}

/// Rescales `[0, 1]` images by 255 and evaluates every metric.
/// `pred` plays the role of `X`, `target` of `Y`.
pub fn evaluate_pair<T: Element>(
    sample_id: impl Into<String>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    ssim_mode: SsimMode,
) -> Result<SampleMetrics> {
    let scale = |t: &Tensor<T>| -> Tensor<f64> { t.cast::<f64>().map(|v| v * PEAK) };
    let (x, y) = (scale(pred), scale(target));
    let mse_v = mse(&x, &y)?;
    let angle = sam(&x, &y)?;
    Ok(SampleMetrics {
        sample_id: sample_id.into(),
        mae: mae(&x, &y)?,
        mse: mse_v,
        psnr_db: psnr_from_mse(mse_v, PEAK),
        ssim: ssim(&x, &y, ssim_mode, SsimParams::default())?,
        sam_deg: angle.degrees,
        sam_skipped: angle.skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim_mode: SsimMode,
    pub samples: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, ssim_mode: SsimMode) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("metric report over zero samples".into()));
        }
        let n = samples.len() as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let mean = SampleMetrics {
            sample_id: "MEAN".into(),
            mae: avg(|s| s.mae),
            mse: avg(|s| s.mse),
            psnr_db: avg(|s| s.psnr_db),
            ssim: avg(|s| s.ssim),
            sam_deg: avg(|s| s.sam_deg),
            sam_skipped: samples.iter().map(|s| s.sam_skipped).sum(),
        };
        Ok(Self {
            ssim_mode,
            samples,
            mean,
        })
    }

    /// `sample_id,mae,mse,psnr_db,ssim,sam_deg`, one row per sample plus a
    /// `MEAN` row. Infinite PSNR prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,mae,mse,psnr_db,ssim,sam_deg\n");
        for s in self.samples.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.sample_id,
                s.mae,
                s.mse,
                fmt_db(s.psnr_db),
                s.ssim,
                s.sam_deg
            ));
        }
        out
    }
}

fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}
