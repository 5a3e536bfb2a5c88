//! Merging, kNN and retrieval against brute-force reimplementations.

mod common;

use common::{brute_components, brute_knn, brute_recall, clustered_bank, grid_features};
use memdisc::evaluate::{knn_classify, recall_at_k};
use memdisc::membank::GroupTable;
use memdisc::mining::{cosine_distance, merge_stage, MergeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five thresholds spread over the observed pairwise distances.
fn sigmas(bank: &memdisc::membank::MemoryBank<f64>) -> Vec<f64> {
    let n = bank.n();
    let mut d: Vec<f64> = (0..n.min(60))
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| cosine_distance(bank.row(i), bank.row(j)))
        .collect();
    d.sort_by(f64::total_cmp);
    [0.0, 0.002, 0.01, 0.05, 0.2].iter().map(|&q| d[(q * (d.len() - 1) as f64) as usize]).collect()
}

#[test]
fn merge_matches_threshold_graph_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for bank_index in 0..50 {
        let n = rng.random_range(2..=500);
        let dim = rng.random_range(2..12);
        let centres = rng.random_range(1..20);
        let spread = rng.random_range(0.02..0.6);
        let bank = clustered_bank(n, dim, centres, spread, bank_index);
        let mut groups = GroupTable::identity(n);
        if bank_index % 3 == 0 {
            for _ in 0..n / 10 {
                groups.union(rng.random_range(0..n), rng.random_range(0..n));
            }
        }
        for sigma in sigmas(&bank) {
            let expected = brute_components(&bank, &groups, sigma);
            let mut merged_bank = bank.clone();
            let cfg = MergeConfig {
                sigma: Some(sigma),
                safety_cap: 1.0,
                ..MergeConfig::default()
            };
            let (merged, _) = merge_stage(&mut merged_bank, &groups, &cfg).unwrap();
            let got: Vec<usize> = (0..n).map(|i| merged.root(i)).collect();
            assert_eq!(got, expected, "bank {bank_index} (n {n}), sigma {sigma}");
        }
    }
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..40u64 {
        let n = rng.random_range(1..=300);
        let dim = rng.random_range(1..6);
        let classes = rng.random_range(1..6);
        let train = grid_features(n, dim, case);
        let queries = grid_features(rng.random_range(1..50), dim, case + 1000);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let k = rng.random_range(1..=n);
        let tau = rng.random_range(0.05..1.0);
        let got = knn_classify(&train, &labels, &queries, dim, k, tau).unwrap();
        assert_eq!(got, brute_knn(&train, &labels, &queries, dim, k, tau), "case {case}");
    }
}

#[test]
fn recall_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..40u64 {
        let n = rng.random_range(2..=300);
        let dim = rng.random_range(1..6);
        let feats = grid_features(n, dim, case);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
        let ks = [1, 2, 5, 10, 100, 1000];
        let report = recall_at_k(&feats, &labels, dim, &ks).unwrap();
        for (&k, &(capped, r)) in ks.iter().zip(&report.recalls) {
            assert_eq!(capped, k.min(n - 1));
            assert_eq!(r, brute_recall(&feats, &labels, dim, k), "case {case}, k {k}");
        }
    }
}
