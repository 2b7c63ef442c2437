//! Labelled image datasets: synthetic texture generation, archive layout and
//! class-stratified subsets.
//!
//! Each synthetic class is an oriented sinusoidal grating with its own
//! frequency and base colour. Per-image phase, colour offset and pixel noise
//! keep raw pixels only weakly separable, so learned filters matter.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{read_archive, write_archive, TensorMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_KEY: &str = "images";
pub const LABELS_KEY: &str = "labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Grating frequencies, in cycles per image, are spread over this band.
    pub frequency_band: [f32; 2],
    /// Grating amplitude around the base colour.
    #[serde(default = "default_amplitude")]
    pub amplitude: f32,
    /// Spread of the class base colours around mid-gray.
    #[serde(default = "default_color_spread")]
    pub color_spread: f32,
    /// Std of the per-image colour offset.
    #[serde(default = "default_color_offset")]
    pub color_offset: f32,
    /// Std of the per-image orientation perturbation, in radians.
    #[serde(default = "default_orientation_jitter")]
    pub orientation_jitter: f32,
    /// Std of per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Draw a fresh grating phase per image; when false every image uses phase 0.
    #[serde(default = "default_true")]
    pub random_phase: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    32
}
fn default_amplitude() -> f32 {
    0.2
}
fn default_color_spread() -> f32 {
    0.1
}
fn default_color_offset() -> f32 {
    0.15
}
fn default_orientation_jitter() -> f32 {
    0.2
}
fn default_noise() -> f32 {
    0.15
}
fn default_true() -> bool {
    true
}

impl SyntheticSpec {
    /// Large, low-frequency dataset standing in for generic pretraining data.
    pub fn source(seed: u64) -> Self {
        Self {
            n_classes: 8,
            images_per_class: 250,
            image_size: 32,
            frequency_band: [1.5, 4.0],
            amplitude: default_amplitude(),
            color_spread: default_color_spread(),
            color_offset: default_color_offset(),
            orientation_jitter: default_orientation_jitter(),
            noise: default_noise(),
            random_phase: true,
            seed,
        }
    }

    /// Small, higher-frequency dataset standing in for a specialised domain.
    pub fn target(seed: u64) -> Self {
        Self { n_classes: 4, images_per_class: 125, frequency_band: [5.0, 9.0], ..Self::source(seed) }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "source" => Ok(Self::source(seed)),
            "target" => Ok(Self::target(seed)),
            other => Err(Error::Config(format!("unknown dataset preset {other:?}; expected source or target"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.images_per_class < 2 {
            return Err(Error::Config(format!("images_per_class must be at least 2, got {}", self.images_per_class)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        let [lo, hi] = self.frequency_band;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("frequency_band must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("color_spread", self.color_spread),
            ("color_offset", self.color_offset),
            ("orientation_jitter", self.orientation_jitter),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Images `[N, 3, H, W]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("images must have shape [N, 3, H, W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::DatasetMismatch(format!("{} images but {} labels", shape[0], labels.len())));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        if n_classes < 2 {
            return Err(Error::DatasetMismatch("a labelled dataset needs at least two classes".into()));
        }
        for c in 0..n_classes {
            if !labels.contains(&c) {
                return Err(Error::DatasetMismatch(format!("class {c} has no samples (labels must be 0..K-1)")));
            }
        }
        Ok(Self { images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = self.image_size();
        let n = 3 * h * w;
        Tensor::new(vec![3, h, w], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("valid image")
    }

    /// Images at `indices` stacked into a batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.images.select(indices).expect("indices in range")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for {} samples", self.len())));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { images: self.images.select(indices)?, labels, n_classes: self.n_classes })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// SHA-256 over shapes, labels and pixel bits; used to check two reports share a dataset.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_archive(&self) -> TensorMap {
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f32).collect()).expect("labels");
        TensorMap::from([(IMAGES_KEY.to_string(), self.images.clone()), (LABELS_KEY.to_string(), labels)])
    }

    pub fn from_archive(mut archive: TensorMap) -> Result<Self> {
        let images = archive
            .remove(IMAGES_KEY)
            .ok_or_else(|| Error::Naming(format!("dataset archive has no {IMAGES_KEY:?} tensor")))?;
        let labels = archive
            .remove(LABELS_KEY)
            .ok_or_else(|| Error::Naming(format!("dataset archive has no {LABELS_KEY:?} tensor")))?;
        if let Some(extra) = archive.keys().next() {
            return Err(Error::Naming(format!("unexpected tensor {extra:?} in dataset archive")));
        }
        if labels.ndim() != 1 {
            return Err(Error::Shape(format!("labels must be 1-D, got {:?}", labels.shape())));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 1e6 {
                    Ok(v as usize)
                } else {
                    Err(Error::DatasetMismatch(format!("label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_archive(path, &self.to_archive())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(read_archive(path)?)
    }
}

struct ClassStyle {
    frequency: f64,
    orientation: f64,
    color: [f64; 3],
}

fn class_styles(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<ClassStyle> {
    let k = spec.n_classes;
    let [lo, hi] = spec.frequency_band.map(|v| v as f64);
    // Frequencies and orientations are interleaved so neighbouring classes differ in both.
    let mut freq_slots: Vec<usize> = (0..k).collect();
    freq_slots.shuffle(rng);
    (0..k)
        .map(|c| {
            let t = if k > 1 { freq_slots[c] as f64 / (k - 1) as f64 } else { 0.5 };
            let color = [0; 3].map(|_: i32| 0.5 + spec.color_spread as f64 * rng.random_range(-1.0..=1.0));
            ClassStyle { frequency: lo + t * (hi - lo), orientation: PI * c as f64 / k as f64, color }
        })
        .collect()
}

/// Deterministic, class-balanced synthetic dataset. Labels are grouped by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles = class_styles(spec, &mut rng);
    let s = spec.image_size;
    let n = spec.n_classes * spec.images_per_class;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, spec.noise as f64).expect("non-negative std");
    let offset = Normal::new(0.0, spec.color_offset as f64).expect("non-negative std");
    let tilt = Normal::new(0.0, spec.orientation_jitter as f64).expect("non-negative std");
    for (class, style) in styles.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            let phase = if spec.random_phase { rng.random_range(0.0..2.0 * PI) } else { 0.0 };
            let theta = style.orientation + tilt.sample(&mut rng);
            let shift = [0; 3].map(|_: i32| offset.sample(&mut rng));
            let (dx, dy) = (theta.cos(), theta.sin());
            let k = 2.0 * PI * style.frequency / s as f64;
            let grating: Vec<f64> = (0..s * s)
                .map(|i| {
                    let (y, x) = ((i / s) as f64, (i % s) as f64);
                    (k * (x * dx + y * dy) + phase).sin()
                })
                .collect();
            for ch in 0..3 {
                let base = style.color[ch] + shift[ch];
                for g in &grating {
                    let v = base + spec.amplitude as f64 * g + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, 3, s, s], data)?, labels)
}

/// Class-stratified subset holding `fraction` of each class.
///
/// Every run uses the same seed-derived permutation per class and takes the
/// `run_index`-th consecutive block of it, so runs are disjoint while
/// `(run_index + 1) * fraction <= 1` and wrap around beyond that.
pub fn split_fraction(dataset: &Dataset, fraction: f64, run_index: usize, seed: u64) -> Result<Dataset> {
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    dataset.subset(&fraction_indices(dataset, fraction, run_index, seed)?)
}

/// Sorted sample indices selected by [`split_fraction`].
pub fn fraction_indices(dataset: &Dataset, fraction: f64, run_index: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..dataset.len()).collect());
    }
    let mut picked = Vec::new();
    for (class, mut members) in dataset.class_indices().into_iter().enumerate() {
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {fraction} leaves no samples of class {class} ({} available)",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let start = run_index * take;
        picked.extend((0..take).map(|j| members[(start + j) % members.len()]));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Stratified split into `(train, test)` with `test_fraction` of each class held out.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in dataset.class_indices().into_iter().enumerate() {
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        if n_test == 0 || n_test == members.len() {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, too few for a {test_fraction} test split",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}
