//! Stochastic view generation: crop + resize, flip, colour jitter, grayscale.
//!
//! Every view draws from its own ChaCha stream derived from
//! `(seed, sample_key, view)`, so augmentation output never depends on the
//! order in which samples are processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_OUTPUT_SIZE: usize = 8;
/// Views per sample key; bounds the number of local crops.
pub const MAX_VIEWS: usize = 16;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Range of crop area as a fraction of the image area.
    pub crop_scale: [f32; 2],
    pub output_size: usize,
    pub flip_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale_prob: f32,
    /// Rotate by a uniformly chosen multiple of 90 degrees.
    pub rotate90: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: [0.3, 1.0],
            output_size: 32,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            rotate90: false,
        }
    }
}

impl AugmentPolicy {
    /// A policy that only resizes.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            output_size,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            rotate90: false,
        }
    }

    /// Default policy at the small-crop size used for local views.
    pub fn local(output_size: usize) -> Self {
        Self { crop_scale: [0.1, 0.4], output_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)]
        {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("{name} strength must be in [0, 1], got {s}")));
            }
        }
        if self.output_size < MIN_OUTPUT_SIZE {
            return Err(Error::Config(format!(
                "output_size must be at least {MIN_OUTPUT_SIZE}, got {}",
                self.output_size
            )));
        }
        Ok(())
    }
}

/// Random stream for one view of one sample.
pub fn view_rng(seed: u64, sample_key: u64, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_key.wrapping_mul(MAX_VIEWS as u64).wrapping_add(view as u64));
    rng
}

/// Planar RGB image.
struct Image {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Image {
    fn plane(&self, c: usize) -> &[f32] {
        &self.px[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    fn luma(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.h * self.w).map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).collect()
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] if h >= MIN_OUTPUT_SIZE && w >= MIN_OUTPUT_SIZE => Ok((h, w)),
        [3, h, w] => Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the minimal crop of {MIN_OUTPUT_SIZE}x{MIN_OUTPUT_SIZE}"
        ))),
        ref s => Err(Error::Shape(format!("expected an image of shape [3, H, W], got {s:?}"))),
    }
}

/// Bilinear resize of a crop window, sampling at pixel centres.
fn crop_resize(src: &Image, top: usize, left: usize, side_h: usize, side_w: usize, out: usize) -> Image {
    let mut px = vec![0.0f32; 3 * out * out];
    let axis = |dst: usize, side: usize| {
        let pos = ((dst as f32 + 0.5) * side as f32 / out as f32 - 0.5).clamp(0.0, (side - 1) as f32);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, pos - i0 as f32)
    };
    let rows: Vec<_> = (0..out).map(|y| axis(y, side_h)).collect();
    let cols: Vec<_> = (0..out).map(|x| axis(x, side_w)).collect();
    for c in 0..3 {
        let plane = src.plane(c);
        let at = |y: usize, x: usize| plane[(top + y) * src.w + left + x];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    top_row * (1.0 - fy) + bottom_row * fy
                };
                px[c * out * out + y * out + x] = v;
            }
        }
    }
    Image { h: out, w: out, px }
}

fn flip_horizontal(img: &mut Image) {
    for row in img.px.chunks_mut(img.w) {
        row.reverse();
    }
}

/// Rotate a square image counter-clockwise by `quarter_turns * 90` degrees.
fn rotate(img: &Image, quarter_turns: usize) -> Image {
    let n = img.h;
    let mut px = vec![0.0; img.px.len()];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = match quarter_turns % 4 {
                    0 => (y, x),
                    1 => (x, n - 1 - y),
                    2 => (n - 1 - y, n - 1 - x),
                    _ => (n - 1 - x, y),
                };
                px[c * n * n + y * n + x] = img.px[c * n * n + sy * n + sx];
            }
        }
    }
    Image { h: n, w: n, px }
}

fn jitter(img: &mut Image, policy: &AugmentPolicy, rng: &mut impl Rng) {
    if policy.brightness > 0.0 {
        let b = rng.random_range(-policy.brightness..=policy.brightness);
        img.px.iter_mut().for_each(|v| *v += b);
    }
    if policy.contrast > 0.0 {
        let f = rng.random_range(1.0 - policy.contrast..=1.0 + policy.contrast);
        let luma = img.luma();
        let mean = luma.iter().map(|&v| v as f64).sum::<f64>() as f32 / luma.len() as f32;
        img.px.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
    }
    if policy.saturation > 0.0 {
        let f = rng.random_range(1.0 - policy.saturation..=1.0 + policy.saturation);
        let gray = img.luma();
        let n = gray.len();
        for (i, v) in img.px.iter_mut().enumerate() {
            let g = gray[i % n];
            *v = g + (*v - g) * f;
        }
    }
}

fn to_grayscale(img: &mut Image) {
    let gray = img.luma();
    let n = gray.len();
    for c in 0..3 {
        img.px[c * n..(c + 1) * n].copy_from_slice(&gray);
    }
}

/// One augmented view of `image` (`[3, H, W]`, values in `[0, 1]`).
pub fn augment_view(image: &Tensor, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    policy.validate()?;
    let (h, w) = check_image(image)?;
    let src = Image { h, w, px: image.data().to_vec() };
    let out = policy.output_size;

    let [lo, hi] = policy.crop_scale;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (side_h, side_w) = if scale >= 1.0 {
        (h, w)
    } else {
        let side = ((scale as f64 * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
        (side, side)
    };
    let top = if side_h < h { rng.random_range(0..=h - side_h) } else { 0 };
    let left = if side_w < w { rng.random_range(0..=w - side_w) } else { 0 };
    let mut img = crop_resize(&src, top, left, side_h, side_w, out);

    if policy.flip_prob > 0.0 && rng.random::<f32>() < policy.flip_prob {
        flip_horizontal(&mut img);
    }
    if policy.rotate90 {
        let turns = rng.random_range(0..4usize);
        img = rotate(&img, turns);
    }
    jitter(&mut img, policy, rng);
    if policy.grayscale_prob > 0.0 && rng.random::<f32>() < policy.grayscale_prob {
        to_grayscale(&mut img);
    }
    img.px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, out, out], img.px)
}

/// Two views of the same image from disjoint streams 0 and 1 of `sample_key`.
pub fn augment_pair(image: &Tensor, policy: &AugmentPolicy, seed: u64, sample_key: u64) -> Result<(Tensor, Tensor)> {
    let a = augment_view(image, policy, &mut view_rng(seed, sample_key, 0))?;
    let b = augment_view(image, policy, &mut view_rng(seed, sample_key, 1))?;
    Ok((a, b))
}

/// Two global views followed by `n_local` small views.
pub fn multi_crop(
    image: &Tensor,
    global: &AugmentPolicy,
    local: &AugmentPolicy,
    n_local: usize,
    seed: u64,
    sample_key: u64,
) -> Result<Vec<Tensor>> {
    if n_local + 2 > MAX_VIEWS {
        return Err(Error::Config(format!("at most {} local crops are supported, got {n_local}", MAX_VIEWS - 2)));
    }
    let (a, b) = augment_pair(image, global, seed, sample_key)?;
    let mut views = vec![a, b];
    for v in 0..n_local {
        views.push(augment_view(image, local, &mut view_rng(seed, sample_key, 2 + v))?);
    }
    Ok(views)
}
