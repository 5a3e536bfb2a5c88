//! Stochastic augmentation pipelines and multi-augmentation batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageSet;
use crate::membank::GroupTable;
use crate::numkernel::Tensor;
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("instance {index} out of range for {len} images")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("group table covers {groups} instances, dataset has {images}")]
    GroupSizeMismatch { groups: usize, images: usize },
    #[error("instance {0} has an empty group")]
    EmptyGroup(usize),
}

/// Strengths and probabilities of each transform family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub grayscale_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub jitter_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            grayscale_prob: 0.2,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_prob: 0.8,
        }
    }
}

impl AugmentPolicy {
    /// The policy that always samples the identity pipeline.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            grayscale_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            jitter_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let probs = [self.flip_prob, self.grayscale_prob, self.jitter_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AugmentError::InvalidPolicy(format!("probabilities {probs:?} outside [0, 1]")));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AugmentError::InvalidPolicy(format!("crop scale ({lo}, {hi}) not within (0, 1]")));
        }
        let strengths = [self.brightness, self.contrast, self.saturation];
        if strengths.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(AugmentError::InvalidPolicy(format!("jitter strengths {strengths:?}")));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

/// Multiplicative colour-jitter factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// A transform chain with every random choice bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pipeline {
    /// `None` keeps the full frame.
    pub crop: Option<Crop>,
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
}

impl Pipeline {
    pub const IDENTITY: Pipeline = Pipeline {
        crop: None,
        flip: false,
        jitter: None,
        grayscale: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

fn factor(rng: &mut ChaCha8Rng, strength: f64) -> f64 {
    if strength == 0.0 {
        return 1.0;
    }
    rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
}

/// Draws a pipeline for a `height × width` image. The number of draws is
/// fixed regardless of outcomes, so streams stay aligned across policies.
pub fn sample_pipeline(policy: &AugmentPolicy, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Pipeline {
    let [_, h, w] = shape;
    let (lo, hi) = policy.crop_scale;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let side = scale.sqrt();
    let (cw, ch) = (side * w as f64, side * h as f64);
    let ux: f64 = rng.random();
    let uy: f64 = rng.random();
    let crop = (scale < 1.0).then(|| Crop {
        x0: ux * (w as f64 - cw),
        y0: uy * (h as f64 - ch),
        width: cw,
        height: ch,
    });
    let flip = rng.random_bool(policy.flip_prob);
    let jitter_on = rng.random_bool(policy.jitter_prob);
    let jitter = Jitter {
        brightness: factor(rng, policy.brightness),
        contrast: factor(rng, policy.contrast),
        saturation: factor(rng, policy.saturation),
    };
    let grayscale = rng.random_bool(policy.grayscale_prob);
    Pipeline {
        crop,
        flip,
        jitter: jitter_on.then_some(jitter),
        grayscale,
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn crop_resize(image: &[f32], shape: [usize; 3], crop: Crop) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0f32; image.len()];
    let sx = crop.width / w as f64;
    let sy = crop.height / h as f64;
    for oy in 0..h {
        let y = (crop.y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (y - y0 as f64) as f32;
        for ox in 0..w {
            let x = (crop.x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (x - x0 as f64) as f32;
            for ch in 0..c {
                let p = &image[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] + fx * (p[y0 * w + x1] - p[y0 * w + x0]);
                let bottom = p[y1 * w + x0] + fx * (p[y1 * w + x1] - p[y1 * w + x0]);
                out[ch * h * w + oy * w + ox] = (top + fy * (bottom - top)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn flip_horizontal(image: &mut [f32], shape: [usize; 3]) {
    let w = shape[2];
    for row in image.chunks_exact_mut(w) {
        row.reverse();
    }
}

fn apply_jitter(image: &mut [f32], shape: [usize; 3], j: Jitter) {
    let [c, h, w] = shape;
    let plane = h * w;
    let b = j.brightness as f32;
    for v in image.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let gray: Vec<f32> = if c == 3 {
        (0..plane)
            .map(|i| luma(image[i], image[plane + i], image[2 * plane + i]))
            .collect()
    } else {
        image[..plane].to_vec()
    };
    let mean = gray.iter().sum::<f32>() / plane as f32;
    let ct = j.contrast as f32;
    for v in image.iter_mut() {
        *v = (mean + ct * (*v - mean)).clamp(0.0, 1.0);
    }
    if c == 3 {
        let s = j.saturation as f32;
        for i in 0..plane {
            let g = luma(image[i], image[plane + i], image[2 * plane + i]);
            for ch in 0..3 {
                let v = &mut image[ch * plane + i];
                *v = (g + s * (*v - g)).clamp(0.0, 1.0);
            }
        }
    }
}

fn apply_grayscale(image: &mut [f32], shape: [usize; 3]) {
    let [c, h, w] = shape;
    if c != 3 {
        return;
    }
    let plane = h * w;
    for i in 0..plane {
        let g = luma(image[i], image[plane + i], image[2 * plane + i]);
        for ch in 0..3 {
            image[ch * plane + i] = g;
        }
    }
}

/// Applies crop-resize, flip, jitter and grayscale, in that order.
pub fn apply(pipeline: &Pipeline, image: &[f32], shape: [usize; 3]) -> Vec<f32> {
    let mut out = match pipeline.crop {
        Some(crop) => crop_resize(image, shape, crop),
        None => image.to_vec(),
    };
    if pipeline.flip {
        flip_horizontal(&mut out, shape);
    }
    if let Some(j) = pipeline.jitter {
        apply_jitter(&mut out, shape, j);
    }
    if pipeline.grayscale {
        apply_grayscale(&mut out, shape);
    }
    out
}

/// Independent stream for one batch, so batches can be built in any order.
pub fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

/// `|B|` instances with `K` augmented views each; slot `b·K + k` holds view
/// `k` of `instances[b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub instances: Vec<usize>,
    pub sources: Vec<usize>,
    pub images: Vec<f32>,
    pub image_shape: [usize; 3],
    pub k: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let [c, h, w] = self.image_shape;
        let data = self.images.iter().map(|&v| T::of_f64(v as f64)).collect();
        Tensor::new(vec![self.sources.len(), c, h, w], data).expect("batch tensor shape")
    }
}

/// Builds the multi-augmentation batch. Grouped instances draw each view's
/// source image uniformly from their group, themselves included.
pub fn build_batch(
    images: &ImageSet,
    instances: &[usize],
    k: usize,
    groups: &GroupTable,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, AugmentError> {
    if k == 0 {
        return Err(AugmentError::ZeroK);
    }
    if groups.len() != images.len() {
        return Err(AugmentError::GroupSizeMismatch {
            groups: groups.len(),
            images: images.len(),
        });
    }
    let shape = images.shape();
    let mut sources = Vec::with_capacity(instances.len() * k);
    let mut out = Vec::with_capacity(instances.len() * k * images.image_len());
    for &i in instances {
        if i >= images.len() {
            return Err(AugmentError::IndexOutOfRange {
                index: i,
                len: images.len(),
            });
        }
        let group = groups.group_of(i);
        if group.is_empty() {
            return Err(AugmentError::EmptyGroup(i));
        }
        for _ in 0..k {
            let src = if group.len() == 1 {
                i
            } else {
                group[rng.random_range(0..group.len())]
            };
            let pipeline = sample_pipeline(policy, shape, rng);
            sources.push(src);
            out.extend(apply(&pipeline, images.image(src), shape));
        }
    }
    Ok(Batch {
        instances: instances.to_vec(),
        sources,
        images: out,
        image_shape: shape,
        k,
    })
}
