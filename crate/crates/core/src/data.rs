//! Datasets: manifest IO, standardization, augmentation, subject-exclusive
//! folds and a synthetic generator with a known latent.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: u64, msg: String },
    #[error("folds: {0}")]
    Folds(String),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels, height, width]`, values nominally in `[0, 1]`.
    pub image: Tensor<f32>,
    pub age_group: Option<usize>,
    pub gender: Option<usize>,
    pub subject_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelField {
    Age,
    Gender,
}

impl Sample {
    pub fn label(&self, field: LabelField) -> Option<usize> {
        match field {
            LabelField::Age => self.age_group,
            LabelField::Gender => self.gender,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples carrying `field`, with their labels.
    pub fn labeled(&self, field: LabelField) -> (Vec<usize>, Vec<usize>) {
        self.samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.label(field).map(|y| (i, y)))
            .unzip()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

const HEADER: [&str; 4] = ["image_path", "age_group", "gender", "subject_id"];

fn parse_label(field: &str, name: &str, line: u64) -> Result<Option<usize>, DataError> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    match field.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(Some(v)),
        _ => Err(DataError::Manifest {
            line,
            msg: format!("{name} `{field}` is not a positive integer"),
        }),
    }
}

/// Decodes an image file to `[3, h, w]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("pixel count"))
}

/// Encodes a `[3, h, w]` image as 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    let &[3, h, w] = image.shape() else {
        return Err(DataError::Invalid(format!("PNG output needs 3 channels, got {:?}", image.shape())));
    };
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| io_err(path, e))
}

/// Reads a `image_path,age_group,gender,subject_id` manifest. Image paths are
/// relative to the manifest's directory. Unreadable images are skipped with a
/// warning; malformed rows are errors.
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = reader.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(DataError::Manifest {
            line: 1,
            msg: format!("header must be `{}`", HEADER.join(",")),
        });
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Manifest {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(DataError::Manifest {
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let image_path = record[0].trim();
        let subject_id = record[3].trim();
        if image_path.is_empty() || subject_id.is_empty() {
            return Err(DataError::Manifest {
                line,
                msg: "image_path and subject_id are required".into(),
            });
        }
        let age_group = parse_label(&record[1], "age_group", line)?;
        let gender = parse_label(&record[2], "gender", line)?;
        if gender.is_some_and(|g| g > 2) {
            return Err(DataError::Manifest {
                line,
                msg: format!("gender {} not in 1..=2", gender.unwrap_or(0)),
            });
        }
        if age_group.is_none() && gender.is_none() {
            return Err(DataError::Manifest {
                line,
                msg: "row has no label".into(),
            });
        }
        let full = base.join(image_path);
        let image = match read_image(&full) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("manifest line {line}: skipping unreadable image: {e}");
                continue;
            }
        };
        samples.push(Sample {
            image,
            age_group,
            gender,
            subject_id: subject_id.to_string(),
        });
    }
    Ok(Dataset { samples })
}

/// Writes `dir/manifest.csv` and `dir/images/NNNNNN.png`; returns the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| io_err(&manifest, e))?;
    w.write_record(HEADER).map_err(|e| io_err(&manifest, e))?;
    let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        write_image(&dir.join(&rel), &s.image)?;
        w.write_record([rel, opt(s.age_group), opt(s.gender), s.subject_id.clone()])
            .map_err(|e| io_err(&manifest, e))?;
    }
    w.flush().map_err(|e| io_err(&manifest, e))?;
    Ok(manifest)
}

const STD_EPSILON: f64 = 1e-8;

/// Per-channel mean and standard deviation for standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over every pixel of the given images.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self, DataError> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let c = img.shape()[0];
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(DataError::Invalid(format!("channel count {c} differs from {}", sum.len())));
            }
            let plane = img.len() / c;
            for (ch, values) in img.data().chunks(plane).enumerate() {
                for &v in values {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(DataError::Invalid("no images for statistics".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Standardizes a `[c, h, w]` image.
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let c = image.shape()[0];
        let plane = image.len() / c;
        let mut out = image.clone();
        for (ch, values) in out.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], (self.std[ch] * self.std[ch] + STD_EPSILON).sqrt());
            for v in values {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        out
    }
}

pub fn preprocess(sample: &Sample, stats: &ChannelStats) -> Sample {
    Sample {
        image: stats.apply(&sample.image),
        ..sample.clone()
    }
}

fn channel_buffers(image: &Tensor<f32>) -> Vec<ImageBuffer<Luma<f32>, Vec<f32>>> {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    image
        .data()
        .chunks(h * w)
        .take(c)
        .map(|p| ImageBuffer::from_raw(w as u32, h as u32, p.to_vec()).expect("plane size"))
        .collect()
}

fn from_buffers(planes: Vec<ImageBuffer<Luma<f32>, Vec<f32>>>) -> Tensor<f32> {
    let (w, h) = planes[0].dimensions();
    let c = planes.len();
    let data: Vec<f32> = planes.into_iter().flat_map(ImageBuffer::into_raw).collect();
    Tensor::new([c, h as usize, w as usize], data).expect("plane size")
}

/// Bilinear resize of a `[c, h, w]` image.
pub fn resize(image: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    if image.shape()[1..] == [height, width] {
        return image.clone();
    }
    from_buffers(
        channel_buffers(image)
            .iter()
            .map(|p| imageops::resize(p, width as u32, height as u32, FilterType::Triangle))
            .collect(),
    )
}

/// A crop window and flip decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub flip: bool,
}

pub const AREA_RANGE: (f64, f64) = (0.08, 1.0);
pub const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_ATTEMPTS: usize = 10;

fn aspect_ok(w: usize, h: usize) -> bool {
    let r = w as f64 / h as f64;
    (ASPECT_RANGE.0..=ASPECT_RANGE.1).contains(&r)
}

/// Scale and aspect-ratio crop proposal on an `h x w` image, with a centered
/// fallback after ten rejected proposals.
pub fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Crop {
    let area = (h * w) as f64;
    let (lo, hi) = (ASPECT_RANGE.0.ln(), ASPECT_RANGE.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(AREA_RANGE.0..=AREA_RANGE.1);
        let ratio = rng.random_range(lo..=hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h && aspect_ok(cw, ch) {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return Crop {
                x,
                y,
                w: cw,
                h: ch,
                flip: rng.random_bool(0.5),
            };
        }
    }
    // widest centered window with an admissible aspect ratio
    let (mut cw, mut ch) = (w, h);
    if (w as f64) / (h as f64) > ASPECT_RANGE.1 {
        cw = ((h as f64) * ASPECT_RANGE.1).floor() as usize;
    } else if (w as f64) / (h as f64) < ASPECT_RANGE.0 {
        ch = ((w as f64) / ASPECT_RANGE.0).floor() as usize;
    }
    Crop {
        x: (w - cw) / 2,
        y: (h - ch) / 2,
        w: cw,
        h: ch,
        flip: rng.random_bool(0.5),
    }
}

/// Random resized crop plus horizontal flip, output `[c, height, width]`.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R, height: usize, width: usize) -> Tensor<f32> {
    let crop = sample_crop(image.shape()[1], image.shape()[2], rng);
    apply_crop(image, crop, height, width)
}

pub fn apply_crop(image: &Tensor<f32>, crop: Crop, height: usize, width: usize) -> Tensor<f32> {
    from_buffers(
        channel_buffers(image)
            .iter()
            .map(|p| {
                let c = imageops::crop_imm(p, crop.x as u32, crop.y as u32, crop.w as u32, crop.h as u32).to_image();
                let r = imageops::resize(&c, width as u32, height as u32, FilterType::Triangle);
                if crop.flip {
                    imageops::flip_horizontal(&r)
                } else {
                    r
                }
            })
            .collect(),
    )
}

/// Independent random stream for one sample in one epoch.
pub fn sample_rng(seed: u64, index: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 20) ^ epoch as u64);
    rng
}

/// Subject-to-fold map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.get(subject).copied()
    }

    /// `(train, validation)` sample indices with `fold` held out.
    pub fn split(&self, dataset: &Dataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..dataset.len()).partition(|&i| self.fold_of(&dataset.samples[i].subject_id) != Some(fold))
    }
}

/// Shuffles subjects by seed and deals them round-robin into folds.
pub fn assign_folds(dataset: &Dataset, n_folds: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    let subjects: BTreeSet<&str> = dataset.samples.iter().map(|s| s.subject_id.as_str()).collect();
    assign_subjects(subjects.into_iter(), n_folds, seed)
}

pub fn assign_subjects<'a>(
    subjects: impl Iterator<Item = &'a str>,
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment, DataError> {
    let mut subjects: Vec<&str> = subjects.collect::<BTreeSet<_>>().into_iter().collect();
    if n_folds == 0 {
        return Err(DataError::Folds("fold count must be positive".into()));
    }
    if subjects.len() < n_folds {
        return Err(DataError::Folds(format!("{} subjects for {n_folds} folds", subjects.len())));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldAssignment {
        n_folds,
        folds: subjects.iter().enumerate().map(|(i, s)| (s.to_string(), i % n_folds)).collect(),
    })
}

/// Generator settings. `overlap` lists thresholds `k` at which classes `k`
/// and `k + 1` share part of their latent range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    #[serde(default)]
    pub overlap: Vec<usize>,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.05
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            size,
            overlap: Vec::new(),
            seed,
            noise: default_noise(),
        }
    }

    pub fn with_overlap(mut self, thresholds: &[usize]) -> Self {
        self.overlap = thresholds.to_vec();
        self
    }
}

/// Generated data with the latents that produced it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Ordinal latent in `[0, 1]` per sample; the class signal.
    pub latent: Vec<f64>,
    /// Independent latent deciding gender.
    pub gender_latent: Vec<f64>,
}

/// Margin kept free at each end of a class's latent interval.
const MARGIN: f64 = 0.1;
/// How far an overlapping class reaches past the shared boundary.
const REACH: f64 = 0.35;

/// Latent interval of class `c` in units of `1 / K`.
pub fn latent_range(cfg: &SynthConfig, c: usize) -> (f64, f64) {
    let k = cfg.classes as f64;
    let lo = (c - 1) as f64 + if cfg.overlap.contains(&(c - 1)) { -REACH } else { MARGIN };
    let hi = c as f64 + if cfg.overlap.contains(&c) { REACH } else { -MARGIN };
    (lo.max(0.0) / k, hi.min(k) / k)
}

fn subject_sizes(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let mut s = rng.random_range(2..=5).min(left);
        if left - s == 1 {
            s = if s < 5 { s + 1 } else { s - 1 };
        }
        sizes.push(s);
        left -= s;
    }
    sizes
}

/// Renders class signal from the latent: channel 0 brightness, channel 1 a
/// centered disc whose radius grows with the latent, channel 2 stripes
/// oriented by gender with a per-subject phase.
fn render(size: usize, t: f64, gender: usize, phase: f64, offset: f64, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    let centre = (size as f64 - 1.0) / 2.0;
    let radius = (0.15 + 0.7 * t) * size as f64 / 2.0;
    let brightness = 0.15 + 0.7 * t + offset;
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let d = ((x as f64 - centre).powi(2) + (y as f64 - centre).powi(2)).sqrt();
            let disc = (radius - d + 0.5).clamp(0.0, 1.0);
            let coord = if gender == 1 { y } else { x } as f64;
            let stripe = 0.5 + 0.3 * (std::f64::consts::TAU * coord / 6.0 + phase).sin();
            data[i] = (brightness + noise.sample(rng)) as f32;
            data[n + i] = (0.1 + 0.8 * disc + noise.sample(rng)) as f32;
            data[2 * n + i] = (stripe + noise.sample(rng)) as f32;
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new([3, size, size], data).expect("pixel count")
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Synthetic, DataError> {
    if cfg.classes < 2 {
        return Err(DataError::Invalid("synthetic data needs at least 2 classes".into()));
    }
    if cfg.size < 4 || cfg.per_class == 0 {
        return Err(DataError::Invalid("synthetic data needs size >= 4 and per_class >= 1".into()));
    }
    if let Some(k) = cfg.overlap.iter().find(|&&k| k == 0 || k >= cfg.classes) {
        return Err(DataError::Invalid(format!("overlap threshold {k} outside 1..{}", cfg.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut out = Synthetic {
        dataset: Dataset::default(),
        latent: Vec::new(),
        gender_latent: Vec::new(),
    };
    let mut subject = 0;
    for c in 1..=cfg.classes {
        let (lo, hi) = latent_range(cfg, c);
        for size in subject_sizes(cfg.per_class, &mut rng) {
            subject += 1;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = rng.random_range(-0.005..0.005);
            let g_latent: f64 = rng.random();
            let gender = if g_latent < 0.5 { 1 } else { 2 };
            for _ in 0..size {
                let t = rng.random_range(lo..hi);
                let image = render(cfg.size, t, gender, phase, offset, &noise, &mut rng);
                out.dataset.samples.push(Sample {
                    image,
                    age_group: Some(c),
                    gender: Some(gender),
                    subject_id: format!("s{subject:05}"),
                });
                out.latent.push(t);
                out.gender_latent.push(g_latent);
            }
        }
    }
    Ok(out)
}

/// Stacks samples into a `[n, c, h, w]` batch, resizing to `(height, width)`.
pub fn stack<T: Element>(images: &[Tensor<f32>], height: usize, width: usize) -> Tensor<T> {
    let c = images.first().map_or(0, |i| i.shape()[0]);
    let mut data = Vec::with_capacity(images.len() * c * height * width);
    for img in images {
        data.extend(resize(img, height, width).data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new([images.len(), c, height, width], data).expect("uniform images")
}
