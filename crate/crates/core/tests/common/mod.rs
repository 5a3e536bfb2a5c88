//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use memdisc::evaluate::KnnResult;
use memdisc::losses::{record_total_loss, ConsistencyMode, ConsistencyReduction, LossConfig};
use memdisc::membank::{GroupTable, MemoryBank};
use memdisc::mining::cosine_distance;
use memdisc::numkernel::{grad_check, GradCheckConfig, KernelError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Case {
    pub mode: ConsistencyMode,
    pub reduction: ConsistencyReduction,
    pub k: usize,
    pub instances: Vec<usize>,
    pub n: usize,
    pub dim: usize,
    pub tau: f64,
    pub beta: f64,
    pub merged: bool,
    pub seed: u64,
}

pub fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();
    let modes = [ConsistencyMode::None, ConsistencyMode::Kl, ConsistencyMode::L2];
    for (c, &k) in [1usize, 2, 4].iter().cycle().take(24).enumerate() {
        let n = rng.random_range(4..12);
        let batch = rng.random_range(1..=n.min(4));
        let instances = rand::seq::index::sample(&mut rng, n, batch).into_vec();
        out.push(Case {
            mode: modes[(c / 3) % 3],
            reduction: if c % 2 == 0 { ConsistencyReduction::Sum } else { ConsistencyReduction::Mean },
            k,
            instances,
            n,
            dim: rng.random_range(2..7),
            tau: rng.random_range(0.3..1.0),
            beta: rng.random_range(0.1..2.0),
            merged: c % 4 == 3,
            seed: c as u64,
        });
    }
    out
}

pub fn check(case: &Case) -> f64 {
    let bank = MemoryBank::<f64>::random(case.n, case.dim, 0.5, case.seed).unwrap();
    let mut groups = GroupTable::identity(case.n);
    if case.merged {
        groups.union(0, case.n - 1);
        groups.union(1, 2);
    }
    let cfg = LossConfig {
        temperature: case.tau,
        beta: case.beta,
        mode: case.mode,
        reduction: case.reduction,
    };
    let rows = case.instances.len() * case.k;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed + 100);
    let raw: Vec<f64> = (0..rows * case.dim).map(|_| rng.sample(StandardNormal)).collect();
    let raw = Tensor::new(vec![rows, case.dim], raw).unwrap();
    let report = grad_check(
        |g, ids| {
            let feats = g.l2_normalize(ids[0])?;
            record_total_loss(g, feats, &case.instances, case.k, &groups, &bank, &cfg)
                .map(|n| n.total)
                .map_err(|e| KernelError::InvalidAttr {
                    op: "total_loss",
                    reason: e.to_string(),
                })
        },
        &[raw],
        GradCheckConfig {
            step: 1e-6,
            coords_per_param: 64,
            seed: case.seed,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

/// Unit rows drawn around a few random centres, so thresholds find real clusters.
pub fn clustered_bank(n: usize, dim: usize, centres: usize, spread: f64, seed: u64) -> MemoryBank<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre: Vec<Vec<f64>> = (0..centres)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut rows = Vec::with_capacity(n * dim);
    for i in 0..n {
        let c = &centre[i % centres];
        rows.extend(c.iter().map(|&v| v + spread * rng.sample::<f64, _>(StandardNormal)));
    }
    MemoryBank::from_rows(n, dim, 0.5, rows).unwrap()
}

/// Smallest member of each instance's connected component in the graph
/// joining current roots whose rows are within `sigma`.
pub fn brute_components(bank: &MemoryBank<f64>, groups: &GroupTable, sigma: f64) -> Vec<usize> {
    let n = groups.len();
    let roots: Vec<usize> = (0..n).filter(|&i| groups.root(i) == i).collect();
    let mut label: Vec<usize> = (0..n).collect();
    let mut seen = vec![false; n];
    for &start in &roots {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut component = Vec::new();
        seen[start] = true;
        while let Some(r) = stack.pop() {
            component.push(r);
            for &o in &roots {
                if !seen[o] && cosine_distance(bank.row(r), bank.row(o)) <= sigma {
                    seen[o] = true;
                    stack.push(o);
                }
            }
        }
        let min = component.iter().flat_map(|&r| groups.members(r)).copied().min().unwrap();
        for &r in &component {
            for &m in groups.members(r) {
                label[m] = min;
            }
        }
    }
    label
}

fn sorted_neighbours(sims: &[f64], skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).filter(|&j| Some(j) != skip).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn brute_knn(train: &[f64], labels: &[usize], queries: &[f64], dim: usize, k: usize, tau: f64) -> KnnResult {
    let classes = labels.iter().max().unwrap() + 1;
    let predictions = queries
        .chunks(dim)
        .map(|q| {
            let sims: Vec<f64> = train.chunks(dim).map(|t| dot(t, q)).collect();
            let mut votes = vec![0.0; classes];
            for &j in sorted_neighbours(&sims, None).iter().take(k) {
                votes[labels[j]] += (sims[j] / tau).exp();
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    KnnResult { predictions }
}

pub fn brute_recall(feats: &[f64], labels: &[usize], dim: usize, k: usize) -> f64 {
    let n = labels.len();
    let k = k.min(n - 1);
    let hits = (0..n)
        .filter(|&i| {
            let q = &feats[i * dim..(i + 1) * dim];
            let sims: Vec<f64> = feats.chunks(dim).map(|t| dot(t, q)).collect();
            sorted_neighbours(&sims, Some(i)).iter().take(k).any(|&j| labels[j] == labels[i])
        })
        .count();
    hits as f64 / n as f64
}

/// Features on a coarse grid so that similarity ties are common.
pub fn grid_features(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.random_range(-2i32..=2) as f64 * 0.25).collect()
}
