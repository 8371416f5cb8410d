//! Deterministic synthetic cloudy/clear pairs and their on-disk layout.
//!
//! Every sample is a pure function of `(global seed, index)`. A dataset
//! directory looks like
//!
//! ```text
//! manifest.json
//! train/00000.clear.tnsr  train/00000.cloudy.tnsr  train/00000.mask.tnsr  [*.png]
//! test/00008.clear.tnsr   ...
//! ```
//!
//! with train indices `0..train_count` and test indices following them.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix64, RngStream};
use crate::tensor::{io as tnsr, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_CLOUD_COLOR: f64 = 0.95;
pub const MIN_EXTENT: usize = 8;

/// Hash-based lattice value in `[0, 1)`.
fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(octave ^ mix64(ix as u64 ^ mix64(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated value noise at continuous coordinates.
fn value_noise(seed: u64, octave: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (fade(x - x0), fade(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, octave, ix, iy);
    let b = lattice(seed, octave, ix + 1, iy);
    let c = lattice(seed, octave, ix, iy + 1);
    let d = lattice(seed, octave, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Fractal sum of value-noise octaves, normalized to `[0, 1]`.
fn fbm(seed: u64, x: f64, y: f64, base_freq: f64, octaves: u32, persistence: f64) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, base_freq);
    for o in 0..octaves {
        sum += amp * value_noise(seed, o as u64, x * freq + 17.3 * o as f64, y * freq - 9.1 * o as f64);
        norm += amp;
        amp *= persistence;
        freq *= 2.0;
    }
    sum / norm
}

fn check_extents(h: usize, w: usize) -> Result<()> {
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need extents of at least {MIN_EXTENT}, got {h}×{w}"
        )));
    }
    Ok(())
}

/// Procedural ground scene `[H, W, C_in]` in `[0, 1]`: band-correlated
/// low-frequency value noise plus piecewise regions (checkerboards and
/// gradient strips) that add edges and texture.
pub fn synth_clear(seed: u64, h: usize, w: usize, c_in: usize) -> Result<Tensor<f32>> {
    check_extents(h, w)?;
    if c_in == 0 {
        return Err(Error::InvalidArgument("c_in must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    const LATENTS: usize = 3;
    let latent_seeds: Vec<u64> = (0..LATENTS).map(|_| rng.next_u64()).collect();
    // each band mixes the shared latent fields with its own weights
    let mixing: Vec<[f64; LATENTS]> = (0..c_in)
        .map(|_| {
            let raw = [rng.uniform() + 0.2, rng.uniform() + 0.2, rng.uniform() + 0.2];
            let s: f64 = raw.iter().sum();
            raw.map(|v| v / s)
        })
        .collect();
    let band_offset: Vec<f64> = (0..c_in).map(|_| rng.uniform() * 0.2 - 0.1).collect();
    let region_seed = rng.next_u64();
    let checker_period = 2 + rng.range_inclusive(0, 4);
    let strip_period = 6.0 + rng.uniform() * 10.0;
    let angle = rng.uniform() * std::f64::consts::PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let tint: Vec<f64> = (0..c_in).map(|_| rng.uniform() * 0.5 + 0.5).collect();
    let scale = 1.0 / h.max(w) as f64;

    let mut data = Vec::with_capacity(h * w * c_in);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 * scale, y as f64 * scale);
            let latents: Vec<f64> = latent_seeds
                .iter()
                .map(|&s| fbm(s, fx, fy, 3.0, 4, 0.5))
                .collect();
            let region = fbm(region_seed, fx, fy, 2.0, 2, 0.5);
            let pattern = if region < 0.4 {
                0.0
            } else if region < 0.55 {
                let cell = (x / checker_period + y / checker_period) % 2;
                if cell == 0 { 0.18 } else { -0.18 }
            } else {
                let t = (x as f64 * ca + y as f64 * sa) / strip_period;
                0.3 * (t - t.floor()) - 0.15
            };
            for b in 0..c_in {
                let base: f64 = mixing[b].iter().zip(&latents).map(|(m, l)| m * l).sum();
                let v = 1.6 * (base - 0.5) + 0.5 + band_offset[b] + pattern * tint[b];
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(&[h, w, c_in], data)
}

/// Cloud opacity `[H, W, 1]` in `[0, 1]`: fractal noise thresholded at its
/// `(1 − coverage)` quantile, with a linear ramp of width proportional to
/// `softness` around the threshold.
pub fn synth_mask(seed: u64, h: usize, w: usize, coverage: f64, softness: f64) -> Result<Tensor<f32>> {
    check_extents(h, w)?;
    if !(0.0..=1.0).contains(&coverage) || !(0.0..=1.0).contains(&softness) {
        return Err(Error::InvalidArgument(format!(
            "coverage and softness must lie in [0, 1], got {coverage}, {softness}"
        )));
    }
    if coverage == 0.0 {
        return Ok(Tensor::zeros(&[h, w, 1]));
    }
    if coverage == 1.0 {
        return Ok(Tensor::full(&[h, w, 1], 1.0));
    }
    let scale = 1.0 / h.max(w) as f64;
    let noise: Vec<f64> = (0..h * w)
        .map(|i| fbm(seed, (i % w) as f64 * scale, (i / w) as f64 * scale, 2.5, 5, 0.55))
        .collect();
    let mut sorted = noise.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let above = ((coverage * n as f64).round() as usize).min(n);
    if above == 0 {
        return Ok(Tensor::zeros(&[h, w, 1]));
    }
    // threshold halfway between the last clear and the first cloudy value
    let hi = sorted[n - above];
    let lo = if above < n { sorted[n - above - 1] } else { hi };
    let threshold = 0.5 * (lo + hi);
    let spread = sorted[n - 1] - sorted[0];
    let width = softness * 0.5 * spread;
    let data = noise
        .iter()
        .map(|&v| {
            let m = if width > 0.0 {
                (0.5 + (v - threshold) / width).clamp(0.0, 1.0)
            } else if v > threshold {
                1.0
            } else {
                0.0
            };
            m as f32
        })
        .collect();
    Tensor::new(&[h, w, 1], data)
}

/// `cloudy = mask · color + (1 − mask) · clear`, per band.
pub fn composite(clear: &Tensor<f32>, mask: &Tensor<f32>, color: &[f32]) -> Result<Tensor<f32>> {
    let (h, w, c) = clear.hwc()?;
    if mask.shape() != [h, w, 1] {
        return Err(Error::shape(
            "composite",
            format!("mask {:?} does not match image {:?}", mask.shape(), clear.shape()),
        ));
    }
    if color.len() != c {
        return Err(Error::shape(
            "composite",
            format!("{} cloud colour values for {c} bands", color.len()),
        ));
    }
    let data = clear
        .data()
        .chunks(c)
        .zip(mask.data())
        .flat_map(|(px, &m)| px.iter().zip(color).map(move |(&v, &col)| m * col + (1.0 - m) * v))
        .collect();
    Tensor::new(&[h, w, c], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub clear: Tensor<f32>,
    pub cloudy: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSettings {
    pub coverage: f64,
    pub softness: f64,
    pub color: f64,
}

impl Default for CloudSettings {
    fn default() -> Self {
        Self {
            coverage: 0.4,
            softness: 0.5,
            color: DEFAULT_CLOUD_COLOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub cloud: CloudSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?} (train, test)"))),
        }
    }
}

impl DatasetManifest {
    /// Splits `count` samples 2:1 into train and test, rounding the train
    /// share to the nearest integer.
    pub fn with_count(seed: u64, size: usize, c_in: usize, count: usize, cloud: CloudSettings) -> Self {
        let train_count = ((count as f64) * 2.0 / 3.0).round() as usize;
        Self {
            version: MANIFEST_VERSION,
            seed,
            h: size,
            w: size,
            c_in,
            train_count,
            test_count: count - train_count,
            cloud,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported manifest version {}", self.version)));
        }
        check_extents(self.h, self.w)?;
        if self.c_in == 0 {
            return Err(Error::InvalidArgument("c_in must be positive".into()));
        }
        let c = &self.cloud;
        for (name, v) in [("coverage", c.coverage), ("softness", c.softness), ("color", c.color)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("cloud {name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Global indices of a split; train and test ranges are disjoint.
    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_count,
            Split::Test => self.train_count..self.train_count + self.test_count,
        }
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        mix64(self.seed ^ mix64(index as u64))
    }

    /// Sample `index`, regenerated from the manifest alone.
    pub fn generate(&self, index: usize) -> Result<SamplePair> {
        let seed = self.sample_seed(index);
        let clear = synth_clear(mix64(seed ^ 1), self.h, self.w, self.c_in)?;
        let mask = synth_mask(mix64(seed ^ 2), self.h, self.w, self.cloud.coverage, self.cloud.softness)?;
        let color = vec![self.cloud.color as f32; self.c_in];
        let cloudy = composite(&clear, &mask, &color)?;
        Ok(SamplePair {
            clear,
            cloudy,
            mask,
            seed,
        })
    }

    pub fn generate_split(&self, split: Split) -> Result<Vec<SamplePair>> {
        self.indices(split).map(|i| self.generate(i)).collect()
    }
}

/// Random `crop × crop` window shared by all three images of a pair.
pub fn random_crop(pair: &SamplePair, crop: usize, multiple: usize, rng: &mut RngStream) -> Result<SamplePair> {
    let (h, w, _) = pair.clear.hwc()?;
    if crop == 0 || crop > h || crop > w {
        return Err(Error::InvalidArgument(format!("crop {crop} does not fit a {h}×{w} image")));
    }
    if multiple > 1 && crop % multiple != 0 {
        return Err(Error::Divisibility {
            extent: crop,
            multiple,
            context: "crop size",
        });
    }
    let y0 = rng.range_inclusive(0, h - crop);
    let x0 = rng.range_inclusive(0, w - crop);
    let cut = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let (_, tw, c) = t.hwc()?;
        let mut data = Vec::with_capacity(crop * crop * c);
        for y in y0..y0 + crop {
            let start = (y * tw + x0) * c;
            data.extend_from_slice(&t.data()[start..start + crop * c]);
        }
        Tensor::new(&[crop, crop, c], data)
    };
    Ok(SamplePair {
        clear: cut(&pair.clear)?,
        cloudy: cut(&pair.cloudy)?,
        mask: cut(&pair.mask)?,
        seed: pair.seed,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit preview of a 1- or 3-band `[0, 1]` image.
pub fn to_preview(t: &Tensor<f32>) -> Result<image::DynamicImage> {
    let (h, w, c) = t.hwc()?;
    let d = t.data();
    match c {
        3 => Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = (y as usize * w + x as usize) * 3;
            Rgb([quantize(d[i]), quantize(d[i + 1]), quantize(d[i + 2])])
        })
        .into()),
        1 => Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([quantize(d[y as usize * w + x as usize])])).into()),
        _ => Err(Error::InvalidArgument(format!("PNG previews need 1 or 3 bands, got {c}"))),
    }
}

pub fn save_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    to_preview(t)?.save(path)?;
    Ok(())
}

/// Reads a PNG as an `[H, W, 3]` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

fn sample_stem(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.dir_name()).join(format!("{index:05}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the three TNSR files of a pair, plus PNG previews for 3-band data
/// when `previews` is set. The previews are lossy and never read back.
pub fn save_pair(root: &Path, split: Split, index: usize, pair: &SamplePair, previews: bool) -> Result<()> {
    let stem = sample_stem(root, split, index);
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    tnsr::save(&with_suffix(&stem, ".clear.tnsr"), &pair.clear)?;
    tnsr::save(&with_suffix(&stem, ".cloudy.tnsr"), &pair.cloudy)?;
    tnsr::save(&with_suffix(&stem, ".mask.tnsr"), &pair.mask)?;
    if previews && pair.clear.shape().get(2) == Some(&3) {
        save_png(&with_suffix(&stem, ".clear.png"), &pair.clear)?;
        save_png(&with_suffix(&stem, ".cloudy.png"), &pair.cloudy)?;
        save_png(&with_suffix(&stem, ".mask.png"), &pair.mask)?;
    }
    Ok(())
}

fn load_f32(path: &Path) -> Result<Tensor<f32>> {
    match tnsr::load(path)? {
        tnsr::AnyTensor::F32(t) => Ok(t),
        other => Ok(other.into_element()),
    }
}

pub fn load_pair(root: &Path, split: Split, index: usize, seed: u64) -> Result<SamplePair> {
    let stem = sample_stem(root, split, index);
    Ok(SamplePair {
        clear: load_f32(&with_suffix(&stem, ".clear.tnsr"))?,
        cloudy: load_f32(&with_suffix(&stem, ".cloudy.tnsr"))?,
        mask: load_f32(&with_suffix(&stem, ".mask.tnsr"))?,
        seed,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// A dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        Ok(Self {
            train: manifest.generate_split(Split::Train)?,
            test: manifest.generate_split(Split::Test)?,
            manifest,
        })
    }

    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Sample ids (`split/index`) of a split, in order.
    pub fn sample_ids(&self, split: Split) -> Vec<String> {
        self.manifest
            .indices(split)
            .map(|i| format!("{}/{i:05}", split.dir_name()))
            .collect()
    }

    pub fn save(&self, root: &Path, previews: bool) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        for split in [Split::Train, Split::Test] {
            for (i, pair) in self.manifest.indices(split).zip(self.split(split)) {
                save_pair(root, split, i, pair, previews)?;
            }
        }
        Ok(())
    }

    /// Loads a dataset directory, checking every referenced file exists and
    /// matches the manifest's shape.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let load_split = |split: Split| -> Result<Vec<SamplePair>> {
            manifest
                .indices(split)
                .map(|i| {
                    let pair = load_pair(root, split, i, manifest.sample_seed(i))?;
                    let img = [manifest.h, manifest.w, manifest.c_in];
                    if pair.clear.shape() != img || pair.cloudy.shape() != img || pair.mask.shape() != [manifest.h, manifest.w, 1] {
                        return Err(Error::shape(
                            "dataset",
                            format!("sample {i} does not match the manifest's {img:?}"),
                        ));
                    }
                    Ok(pair)
                })
                .collect()
        };
        Ok(Self {
            train: load_split(Split::Train)?,
            test: load_split(Split::Test)?,
            manifest,
        })
    }
}
