//! Evaluation protocols: weighted kNN, linear probe, R@k and NMI.
//!
//! Feature matrices are row-major `rows × dim` slices of unit vectors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("k = {k} exceeds the {n} available neighbours")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{what}: {rows} labels for {expected} rows")]
    LabelCount { what: &'static str, rows: usize, expected: usize },
    #[error("feature length {len} is not a multiple of dimension {dim}")]
    FeatureShape { len: usize, dim: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("k-means left a cluster empty after {0} re-seeds")]
    EmptyCluster(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub knn_temperature: f64,
    pub linear_epochs: usize,
    pub linear_lr: f64,
    pub retrieval_ks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 200,
            knn_temperature: 0.1,
            linear_epochs: 100,
            linear_lr: 0.1,
            retrieval_ks: vec![1, 10, 100],
            seed: 0,
        }
    }
}

fn rows<T: Real>(feats: &[T], dim: usize) -> Result<usize, EvalError> {
    if dim == 0 || feats.len() % dim != 0 {
        return Err(EvalError::FeatureShape { len: feats.len(), dim });
    }
    Ok(feats.len() / dim)
}

fn check_labels(what: &'static str, labels: &[usize], expected: usize) -> Result<(), EvalError> {
    if labels.len() != expected {
        return Err(EvalError::LabelCount {
            what,
            rows: labels.len(),
            expected,
        });
    }
    Ok(())
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// Indices of the `k` largest similarities; ties go to the smaller index.
fn top_k(sims: &[f64], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).filter(|&j| Some(j) != skip).collect();
    let order = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<usize>,
}

impl KnnResult {
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        accuracy(&self.predictions, truth)
    }
}

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Weighted kNN vote: the top `k` cosine neighbours each add `exp(sim/τ)`
/// to their class; the heaviest class wins, ties to the smaller index.
pub fn knn_classify<T: Real>(
    train: &[T],
    train_labels: &[usize],
    queries: &[T],
    dim: usize,
    k: usize,
    temperature: f64,
) -> Result<KnnResult, EvalError> {
    let n = rows(train, dim)?;
    rows(queries, dim)?;
    check_labels("train", train_labels, n)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    if !(temperature > 0.0) {
        return Err(EvalError::Temperature(temperature));
    }
    let classes = train_labels.iter().max().map_or(0, |&m| m + 1);
    let predictions = queries
        .chunks(dim)
        .map(|q| {
            let sims: Vec<f64> = train.chunks(dim).map(|t| dot64(t, q)).collect();
            let mut votes = vec![0.0f64; classes];
            for j in top_k(&sims, k, None) {
                votes[train_labels[j]] += (sims[j] / temperature).exp();
            }
            argmax_first(&votes)
        })
        .collect();
    Ok(KnnResult { predictions })
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on frozen features, trained with
/// mini-batch momentum SGD; returns held-out top-1 accuracy.
pub fn linear_probe<T: Real>(
    train: &[T],
    train_labels: &[usize],
    test: &[T],
    test_labels: &[usize],
    dim: usize,
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    let n = rows(train, dim)?;
    let q = rows(test, dim)?;
    check_labels("train", train_labels, n)?;
    check_labels("test", test_labels, q)?;
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |&m| m + 1);
    let first = train_labels.first().copied();
    if train_labels.iter().all(|&l| Some(l) == first) {
        return Err(EvalError::SingleClass);
    }
    let x: Vec<f64> = train.iter().map(|v| v.as_f64()).collect();
    let cols = dim + 1;
    let mut w = vec![0.0f64; classes * cols];
    let mut vel = vec![0.0f64; w.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = 32;
    let mut grad = vec![0.0f64; w.len()];
    let mut logits = vec![0.0f64; classes];
    for epoch in 0..cfg.linear_epochs {
        // Cosine decay to zero over the run.
        let lr = cfg.linear_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.linear_epochs as f64).cos());
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let xi = &x[i * dim..(i + 1) * dim];
                for (c, l) in logits.iter_mut().enumerate() {
                    let wc = &w[c * cols..(c + 1) * cols];
                    *l = wc[dim] + wc[..dim].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for c in 0..classes {
                    let p = (logits[c] - max).exp() / z;
                    let err = p - if c == train_labels[i] { 1.0 } else { 0.0 };
                    let gc = &mut grad[c * cols..(c + 1) * cols];
                    for (g, xv) in gc[..dim].iter_mut().zip(xi) {
                        *g += err * xv;
                    }
                    gc[dim] += err;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((wv, v), g) in w.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = 0.9 * *v + g * scale;
                *wv -= lr * *v;
            }
        }
    }
    let predictions: Vec<usize> = test
        .chunks(dim)
        .map(|xi| {
            let scores: Vec<f64> = (0..classes)
                .map(|c| {
                    let wc = &w[c * cols..(c + 1) * cols];
                    wc[dim] + wc[..dim].iter().zip(xi).map(|(a, b)| a * b.as_f64()).sum::<f64>()
                })
                .collect();
            argmax_first(&scores)
        })
        .collect();
    Ok(accuracy(&predictions, test_labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `(k, R@k)` for each requested `k`; `k` is capped at `n − 1`.
    pub recalls: Vec<(usize, f64)>,
    /// Queries whose label has no other instance; they miss at every `k`.
    pub singleton_queries: usize,
}

/// Fraction of queries with a same-label item among their top-`k`
/// neighbours, the query itself excluded.
pub fn recall_at_k<T: Real>(feats: &[T], labels: &[usize], dim: usize, ks: &[usize]) -> Result<RecallReport, EvalError> {
    let n = rows(feats, dim)?;
    check_labels("retrieval", labels, n)?;
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    if n < 2 {
        return Err(EvalError::KTooLarge { k: 1, n: n.saturating_sub(1) });
    }
    let mut per_label = std::collections::HashMap::new();
    for &l in labels {
        *per_label.entry(l).or_insert(0usize) += 1;
    }
    let kmax = ks.iter().copied().max().unwrap_or(1).min(n - 1);
    // First rank (1-based) at which a match appears, per query.
    let mut first_hit = vec![usize::MAX; n];
    for (i, q) in feats.chunks(dim).enumerate() {
        let sims: Vec<f64> = feats.chunks(dim).map(|t| dot64(t, q)).collect();
        if let Some(rank) = top_k(&sims, kmax, Some(i)).iter().position(|&j| labels[j] == labels[i]) {
            first_hit[i] = rank + 1;
        }
    }
    let recalls = ks
        .iter()
        .map(|&k| {
            let k = k.min(n - 1);
            let hits = first_hit.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    let singleton_queries = labels.iter().filter(|l| per_label[l] == 1).count();
    Ok(RecallReport {
        recalls,
        singleton_queries,
    })
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// `I(A; B) / sqrt(H(A) H(B))`; zero when either partition has zero entropy.
pub fn nmi_partitions(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same items");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    if ha <= 0.0 || hb <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    (mi / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 100;
const KMEANS_RESEEDS: usize = 10;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One k-means++ run; `None` if a cluster ends up empty.
fn kmeans_once(x: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, f64)> {
    let n = x.len() / dim;
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let mut centers: Vec<f64> = row(rng.random_range(0..n)).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend(c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .map(|c| (sq_dist(row(i), &centers[c * dim..(c + 1) * dim]), c))
                .min_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)))
                .unwrap()
                .1;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for j in 0..dim {
                centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(row(i), &centers[a * dim..(a + 1) * dim]))
        .sum();
    Some((assign, inertia))
}

/// Seeded k-means++ with restarts; the assignment of lowest inertia.
pub fn kmeans<T: Real>(feats: &[T], dim: usize, k: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    let n = rows(feats, dim)?;
    if k < 2 {
        return Err(EvalError::TooFewClusters(k));
    }
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    let x: Vec<f64> = feats.iter().map(|v| v.as_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut run = None;
        for _ in 0..KMEANS_RESEEDS {
            run = kmeans_once(&x, dim, k, &mut rng);
            if run.is_some() {
                break;
            }
        }
        let Some((assign, inertia)) = run else {
            return Err(EvalError::EmptyCluster(KMEANS_RESEEDS));
        };
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}

/// NMI between a k-means clustering (one cluster per class) and the labels.
pub fn nmi<T: Real>(feats: &[T], labels: &[usize], dim: usize, seed: u64) -> Result<f64, EvalError> {
    let n = rows(feats, dim)?;
    check_labels("nmi", labels, n)?;
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let clusters = kmeans(feats, dim, distinct.len(), seed)?;
    Ok(nmi_partitions(&clusters, labels))
}

/// Raw-pixel baseline features: each image centred on its own mean and
/// scaled to unit length.
pub fn pixel_features(pixels: &[f32], image_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels.len());
    for img in pixels.chunks(image_len) {
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / image_len as f64;
        let centred: Vec<f64> = img.iter().map(|&v| v as f64 - mean).collect();
        let len = centred.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.extend(centred.iter().map(|v| v / len));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_knn() {
        let r = knn_classify(&[1.0f64, 0.0], &[3], &[1.0, 0.0], 2, 1, 0.1).unwrap();
        assert_eq!(r.predictions, vec![3]);
    }

    #[test]
    fn knn_tie_goes_to_smaller_class() {
        let s = 0.5f64.sqrt();
        let train = [1.0, 0.0, 0.0, 1.0];
        let r = knn_classify(&train, &[1, 0], &[s, s], 2, 2, 0.1).unwrap();
        assert_eq!(r.predictions, vec![0]);
        assert_eq!(
            knn_classify(&train, &[1, 0], &[s, s], 2, 3, 0.1),
            Err(EvalError::KTooLarge { k: 3, n: 2 })
        );
    }

    #[test]
    fn duplicated_items_have_perfect_r1() {
        let feats = [1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let r = recall_at_k(&feats, &[0, 0, 1, 1], 2, &[1, 3]).unwrap();
        assert_eq!(r.recalls, vec![(1, 1.0), (3, 1.0)]);
        assert_eq!(r.singleton_queries, 0);
    }

    #[test]
    fn singleton_label_always_misses() {
        let feats = [1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0];
        let r = recall_at_k(&feats, &[0, 0, 1], 2, &[2]).unwrap();
        assert_eq!(r.singleton_queries, 1);
        assert!((r.recalls[0].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_extremes() {
        assert!((nmi_partitions(&[0, 0, 1, 1], &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
        assert_eq!(nmi_partitions(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.0);
    }

    #[test]
    fn nmi_four_point_contingency() {
        // Clusters {0,1,2},{3}; labels {0,1},{2,3}.
        // I = ln2 - (3/4)ln3 + ... computed from the 2x2 table [[2,1],[0,1]].
        let c = [0, 0, 0, 1];
        let l = [0, 0, 1, 1];
        let (p11, p12, p22) = (0.5f64, 0.25f64, 0.25f64);
        let (pa, pb) = ([0.75f64, 0.25], [0.5f64, 0.5]);
        let mi = p11 * (p11 / (pa[0] * pb[0])).ln() + p12 * (p12 / (pa[0] * pb[1])).ln() + p22 * (p22 / (pa[1] * pb[1])).ln();
        let ha = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let hb = 2f64.ln();
        assert!((nmi_partitions(&c, &l) - mi / (ha * hb).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kmeans_recovers_clear_clusters() {
        let feats = [0.0f64, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0, 10.0, 0.0, 10.1, 0.0];
        let labels = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&feats, &labels, 2, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separable_probe_is_perfect() {
        let train = [1.0f64, 0.1, 0.9, -0.1, -1.0, 0.2, -0.8, 0.0];
        let labels = [0, 0, 1, 1];
        let acc = linear_probe(&train, &labels, &train, &labels, 2, &EvalConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(
            linear_probe(&train, &[1, 1, 1, 1], &train, &labels, 2, &EvalConfig::default()),
            Err(EvalError::SingleClass)
        );
    }
}
