//! Datasets: the CIFAR-10 binary format and a synthetic lattice-of-blobs generator.
//!
//! Images and labels live in separate types. Training code only ever sees an
//! [`ImageSet`]; labels are reached through [`LabelSet::labels`], which
//! counts every read so tests can verify training never touches them.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::Tensor;
use crate::real::Real;

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;
const CIFAR10_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: size {len} is not a multiple of {CIFAR10_RECORD}-byte records")]
    BadSize { path: PathBuf, len: usize },
    #[error("{path}: record {record} has label byte {label} (> 9)")]
    BadLabel { path: PathBuf, record: usize, label: u8 },
    #[error("no CIFAR-10 batch files under {0}")]
    NoFiles(PathBuf),
    #[error("dataset is empty")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Cifar10,
    Synthetic,
}

/// `count × C × H × W` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    shape: [usize; 3],
    pixels: Vec<f32>,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<f32>) -> Result<Self, DataError> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.is_empty() || pixels.len() % per != 0 {
            return Err(DataError::Empty);
        }
        Ok(Self { shape, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// The selected images as a `[len, C, H, W]` tensor.
    pub fn tensor<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of_f64(v as f64)));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("image tensor shape")
    }

    fn select(&self, order: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(order.len() * self.image_len());
        for &i in order {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            pixels,
        }
    }
}

/// Class labels with a read counter.
#[derive(Debug)]
pub struct LabelSet {
    labels: Vec<usize>,
    classes: usize,
    reads: AtomicUsize,
}

impl Clone for LabelSet {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            classes: self.classes,
            reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for LabelSet {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels && self.classes == other.classes
    }
}

impl LabelSet {
    pub fn new(labels: Vec<usize>, classes: usize) -> Self {
        Self {
            labels,
            classes,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn labels(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// How many times [`LabelSet::labels`] was called.
    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageSet,
    pub labels: LabelSet,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10(path: &Path, bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(DataError::BadSize {
            path: path.to_path_buf(),
            len: bytes.len(),
        });
    }
    let records = bytes.len() / CIFAR10_RECORD;
    let mut pixels = Vec::with_capacity(records * (CIFAR10_RECORD - 1));
    let mut labels = Vec::with_capacity(records);
    for (record, chunk) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR10_CLASSES {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label as usize);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn batch_files(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::NoFiles(path.to_path_buf()));
    }
    Ok(files)
}

/// Loads a CIFAR-10 batch file, or every `data_batch_*.bin` in a directory,
/// and keeps a class-stratified random subset of `subset` records
/// (all records when `None`), in a seeded shuffled order.
pub fn load_cifar10(path: &Path, subset: Option<usize>, seed: u64) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in batch_files(path)? {
        let bytes = fs::read(&file).map_err(|source| DataError::Io {
            path: file.clone(),
            source,
        })?;
        let (p, l) = parse_cifar10(&file, &bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = ImageSet::new([3, CIFAR10_SIDE, CIFAR10_SIDE], pixels)?;
    let order = stratified_subset(&labels, CIFAR10_CLASSES, subset, seed);
    Ok(Dataset {
        images: images.select(&order),
        labels: LabelSet::new(order.iter().map(|&i| labels[i]).collect(), CIFAR10_CLASSES),
        provenance: Provenance::Cifar10,
    })
}

/// Indices of a class-stratified random subset, shuffled.
///
/// Per-class quotas are proportional to class frequency, with the rounding
/// remainder going to the classes with the largest fractional share.
pub fn stratified_subset(labels: &[usize], classes: usize, subset: Option<usize>, seed: u64) -> Vec<usize> {
    let total = labels.len();
    let want = subset.unwrap_or(total).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut quota: Vec<usize> = by_class.iter().map(|m| m.len() * want / total.max(1)).collect();
    let mut remainder = want - quota.iter().sum::<usize>();
    let mut shares: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, m)| ((m.len() * want) % total.max(1), c))
        .collect();
    shares.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in &shares {
        if remainder == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remainder -= 1;
        }
    }
    let mut order = Vec::with_capacity(want);
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        order.extend_from_slice(&members[..q]);
    }
    order.shuffle(&mut rng);
    order
}

/// Parameters of the synthetic lattice dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Image side length; images are `3 × size × size`.
    pub size: usize,
    /// Scale of the class-specific pattern; 0 leaves only noise.
    pub separation: f64,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Maximum per-instance translation of the class lattice, in pixels.
    pub max_shift: usize,
    /// Strength of one instance-specific random blob.
    pub distractor: f64,
    /// Per-instance colour tint and background shift; class-irrelevant.
    pub nuisance: f64,
    /// Fraction of images that are exact copies of another image.
    pub duplicate_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 16,
            size: 16,
            separation: 1.0,
            noise: 0.05,
            max_shift: 2,
            distractor: 0.3,
            nuisance: 0.0,
            duplicate_fraction: 0.0,
            seed: 0,
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        Self {
            cx: rng.random_range(0.2..0.8) * size,
            cy: rng.random_range(0.2..0.8) * size,
            radius: rng.random_range(0.08..0.2) * size,
            color: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
        }
    }

    fn value(&self, x: f64, y: f64, channel: usize) -> f64 {
        let d2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        0.5 * self.color[channel] * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }
}

/// Class pattern: Gaussian blobs placed on a class-specific 2-D lattice.
/// Translating the lattice changes pixels a lot but leaves the texture intact.
struct Lattice {
    basis: [[f64; 2]; 2],
    inverse: [[f64; 2]; 2],
    radius: f64,
    color: [f64; 3],
}

impl Lattice {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let spacing = rng.random_range(0.22..0.4) * size;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let skew: f64 = rng.random_range(1.0..2.0);
        let stretch = rng.random_range(0.8..1.4);
        let a = [spacing * theta.cos(), spacing * theta.sin()];
        let b = [
            stretch * spacing * (theta + skew).cos(),
            stretch * spacing * (theta + skew).sin(),
        ];
        let det = a[0] * b[1] - a[1] * b[0];
        Self {
            basis: [a, b],
            inverse: [[b[1] / det, -b[0] / det], [-a[1] / det, a[0] / det]],
            radius: rng.random_range(0.18..0.3) * spacing,
            color: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
        }
    }

    /// Intensity of the lattice at a point, before colouring.
    fn density(&self, x: f64, y: f64) -> f64 {
        let u = self.inverse[0][0] * x + self.inverse[0][1] * y;
        let v = self.inverse[1][0] * x + self.inverse[1][1] * y;
        let (iu, iv) = (u.floor(), v.floor());
        let mut total = 0.0;
        for du in -1..=2 {
            for dv in -1..=2 {
                let (pu, pv) = (iu + du as f64, iv + dv as f64);
                let px = pu * self.basis[0][0] + pv * self.basis[1][0];
                let py = pu * self.basis[0][1] + pv * self.basis[1][1];
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                total += (-d2 / (2.0 * self.radius * self.radius)).exp();
            }
        }
        total
    }
}

fn render_instances(
    spec: &SyntheticSpec,
    prototypes: &[Lattice],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<usize>) {
    let s = spec.size;
    let mut pixels = Vec::with_capacity(spec.classes * per_class * 3 * s * s);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for _ in 0..per_class {
        for (class, lattice) in prototypes.iter().enumerate() {
            let shift = spec.max_shift as f64;
            let (dx, dy) = if shift > 0.0 {
                (rng.random_range(-shift..shift), rng.random_range(-shift..shift))
            } else {
                (0.0, 0.0)
            };
            let amplitude = rng.random_range(0.7..1.3);
            let distractor = Blob::random(rng, s as f64);
            let mut tint = [1.0f64; 3];
            let mut background = [0.5f64; 3];
            for c in 0..3 {
                tint[c] += spec.nuisance * rng.random_range(-1.0..1.0);
                background[c] += 0.25 * spec.nuisance * rng.random_range(-1.0..1.0);
            }
            let density: Vec<f64> = (0..s * s)
                .map(|p| lattice.density((p % s) as f64 - dx, (p / s) as f64 - dy))
                .collect();
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let pattern = 0.5 * lattice.color[c] * density[y * s + x];
                        let noise: f64 = StandardNormal.sample(rng);
                        let v = background[c]
                            + spec.separation * amplitude * tint[c] * pattern
                            + spec.distractor * distractor.value(x as f64, y as f64, c)
                            + spec.noise * noise;
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(class);
        }
    }
    (pixels, labels)
}

/// Training and held-out sets drawn from the same class prototypes.
/// Duplicates are only injected into the training set.
pub fn make_synthetic_split(spec: &SyntheticSpec, test_per_class: usize) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Lattice> = (0..spec.classes)
        .map(|_| Lattice::random(&mut rng, spec.size as f64))
        .collect();
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7261_696e);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7465_7374);
    let (mut pixels, mut labels) = render_instances(spec, &prototypes, spec.per_class, &mut train_rng);
    inject_duplicates(spec, &mut pixels, &mut labels, &mut train_rng);
    let shape = [3, spec.size, spec.size];
    let train = Dataset {
        images: ImageSet::new(shape, pixels).expect("non-empty synthetic set"),
        labels: LabelSet::new(labels, spec.classes),
        provenance: Provenance::Synthetic,
    };
    let (pixels, labels) = render_instances(spec, &prototypes, test_per_class.max(1), &mut test_rng);
    let test = Dataset {
        images: ImageSet::new(shape, pixels).expect("non-empty synthetic set"),
        labels: LabelSet::new(labels, spec.classes),
        provenance: Provenance::Synthetic,
    };
    (train, test)
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Dataset {
    make_synthetic_split(spec, 1).0
}

/// Number of images that share their pixels with another image.
pub fn duplicate_count(fraction: f64, total: usize) -> usize {
    if fraction <= 0.0 || total < 2 {
        return 0;
    }
    ((fraction * total as f64).ceil() as usize).clamp(2, total)
}

fn inject_duplicates(spec: &SyntheticSpec, pixels: &mut [f32], labels: &mut [usize], rng: &mut ChaCha8Rng) {
    let total = labels.len();
    let count = duplicate_count(spec.duplicate_fraction, total);
    if count == 0 {
        return;
    }
    let len = 3 * spec.size * spec.size;
    let chosen = rand::seq::index::sample(rng, total, count).into_vec();
    // Pairs (source, copy); an odd count makes the last group a triple.
    let pairs = count / 2;
    for p in 0..pairs {
        let group = if p + 1 == pairs { &chosen[2 * p..] } else { &chosen[2 * p..2 * p + 2] };
        let src = group[0];
        for &dst in &group[1..] {
            pixels.copy_within(src * len..(src + 1) * len, dst * len);
            labels[dst] = labels[src];
        }
    }
}
