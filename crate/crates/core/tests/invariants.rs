//! Property tests for the invariants that must hold after every operation.

use memdisc::config::{Expansion, TrainConfig};
use memdisc::encoder::Encoder;
use memdisc::losses::{instance_probs, kl_consistency, ProbRow};
use memdisc::membank::{GroupTable, MemoryBank};
use memdisc::metrics::MetricsRow;
use memdisc::mining::{merge_stage, MergeConfig};
use memdisc::numkernel::Tensor;
use memdisc::real::{norm, Precision};
use memdisc::train::{load_data, train, Schedule, TrainState};
use proptest::prelude::*;

const UNIT: f64 = 1e-6;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| norm(v) > 1e-3)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let len = norm(v);
    v.iter().map(|x| x / len).collect()
}

#[derive(Clone, Debug)]
enum Op {
    Update { slot: usize, feats: Vec<f64>, views: usize },
    Single { slot: usize, feat: Vec<f64> },
    Group { instance: usize, feats: Vec<f64> },
    Union { a: usize, b: usize },
    Merge { sigma: f64 },
}

fn op(n: usize, dim: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..n, 1usize..4, vector(dim * 3)).prop_map(move |(slot, views, f)| {
            let feats = f.chunks(dim).take(views).flat_map(unit).collect();
            Op::Update { slot, feats, views }
        }),
        (0..n, vector(dim)).prop_map(|(slot, f)| Op::Single { slot, feat: unit(&f) }),
        (0..n, vector(dim)).prop_map(|(instance, f)| Op::Group { instance, feats: unit(&f) }),
        (0..n, 0..n).prop_map(|(a, b)| Op::Union { a, b }),
        (0.0f64..0.3).prop_map(|sigma| Op::Merge { sigma }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bank_rows_stay_unit_after_every_op(
        seed in 0u64..1000,
        momentum in 0.0f64..=1.0,
        ops in prop::collection::vec(op(12, 5), 1..40),
    ) {
        let mut bank = MemoryBank::<f64>::random(12, 5, momentum, seed).unwrap();
        let mut groups = GroupTable::identity(12);
        for op in ops {
            match op {
                Op::Update { slot, feats, views } => {
                    prop_assert_eq!(feats.len(), views * 5);
                    bank.update(slot, &feats).unwrap();
                }
                Op::Single { slot, feat } => {
                    bank.update_single(slot, &feat).unwrap();
                }
                Op::Group { instance, feats } => {
                    bank.update_group(&groups, instance, &feats).unwrap();
                    let root = groups.root(instance);
                    for &m in groups.members(root) {
                        prop_assert_eq!(bank.row(m), bank.row(root));
                    }
                }
                Op::Union { a, b } => {
                    groups.union(a, b);
                    bank.sync_all(&groups);
                }
                Op::Merge { sigma } => {
                    let cfg = MergeConfig { sigma: Some(sigma), safety_cap: 1.0, ..MergeConfig::default() };
                    groups = merge_stage(&mut bank, &groups, &cfg).unwrap().0;
                }
            }
            prop_assert!(bank.max_norm_deviation() < UNIT);
        }
    }

    #[test]
    fn update_fixed_points(row in vector(6), feat in vector(6), momentum in 0.0f64..=1.0) {
        let row = unit(&row);
        let mut bank = MemoryBank::from_rows(1, 6, 1.0, row.clone()).unwrap();
        let start = bank.row(0).to_vec();
        bank.update(0, &unit(&feat)).unwrap();
        prop_assert_eq!(bank.row(0), &start[..]);

        let mut bank = MemoryBank::from_rows(1, 6, momentum, row).unwrap();
        let start = bank.row(0).to_vec();
        bank.update(0, &start.repeat(3)).unwrap();
        for (a, b) in bank.row(0).iter().zip(&start) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_normalized(seed in 0u64..1000, f in vector(8), tau in 0.01f64..2.0) {
        let bank = MemoryBank::<f64>::random(50, 8, 0.5, seed).unwrap();
        let p = instance_probs(&unit(&f), &bank, tau).unwrap();
        prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < UNIT);
        prop_assert!(p.0.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_identical(
        a in prop::collection::vec(0.001f64..1.0, 6),
        b in prop::collection::vec(0.001f64..1.0, 6),
    ) {
        let norm1 = |v: Vec<f64>| { let s: f64 = v.iter().sum(); ProbRow(v.iter().map(|x| x / s).collect()) };
        let (p, q) = (norm1(a), norm1(b));
        prop_assert!(kl_consistency(&[p.clone(), q]) >= 0.0);
        prop_assert_eq!(kl_consistency(&[p.clone(), p.clone(), p]), 0.0);
    }

    #[test]
    fn embeddings_are_unit(seed in 0u64..100, pixels in prop::collection::vec(0.0f32..1.0, 2 * 3 * 8 * 8)) {
        let cfg = TrainConfig { synthetic_size: 8, embed_dim: 16, ..TrainConfig::default() };
        let encoder = Encoder::<f32>::init(cfg.encoder_spec(), seed).unwrap();
        let images = Tensor::new(vec![2, 3, 8, 8], pixels).unwrap();
        let out = encoder.embed(&images).unwrap();
        for row in out.data().chunks(16) {
            prop_assert!((norm(row) as f64 - 1.0).abs() < UNIT);
        }
    }

    #[test]
    fn lr_schedule_is_exact(
        lr in 0.001f64..1.0,
        decays in prop::collection::btree_set(1usize..60, 0..4),
        epoch in 0usize..60,
    ) {
        let cfg = TrainConfig { lr, lr_decay: 0.1, lr_decay_epochs: decays.iter().copied().collect(), epochs: 60, ..TrainConfig::default() };
        let schedule = Schedule::for_phase(&cfg, &memdisc::train::Phase::BASE);
        let drops = decays.iter().filter(|&&e| e <= epoch).count();
        prop_assert_eq!(schedule.lr_at(epoch), lr * 0.1f64.powi(drops as i32));
    }
}

fn fuzz_config() -> TrainConfig {
    TrainConfig {
        synthetic_classes: 3,
        synthetic_per_class: 8,
        synthetic_test_per_class: 4,
        synthetic_size: 8,
        synthetic_duplicate_fraction: 0.1,
        embed_dim: 8,
        precision: Precision::F64,
        k: 3,
        batch_size: 5,
        epochs: 5,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn five_epoch_fuzz_run_keeps_rows_unit_and_never_reads_labels() {
    let cfg = fuzz_config();
    let (data, _) = load_data(&cfg).unwrap();
    let mut state = TrainState::<f64>::init(&cfg, data.len()).unwrap();
    state.groups.union(0, 5);
    state.bank.sync_all(&state.groups);
    for _ in 0..cfg.epochs {
        let mut rows: Vec<MetricsRow> = Vec::new();
        memdisc::train::run_epochs(&mut state, &cfg, &data.images, None, &mut rows, 1).unwrap();
        assert!(state.bank.max_norm_deviation() < UNIT);
        assert_eq!(state.bank.row(0), state.bank.row(5));
        let all: Vec<usize> = (0..data.len()).collect();
        let emb = state.encoder.embed(&data.images.tensor(&all)).unwrap();
        for row in emb.data().chunks(cfg.embed_dim) {
            assert!((norm(row) - 1.0).abs() < UNIT);
        }
    }
    assert_eq!(state.epoch, 5);
    assert_eq!(data.labels.read_count(), 0);
}

#[test]
fn standard_and_multi_coincide_at_k1() {
    let base = TrainConfig { k: 1, epochs: 2, ..fuzz_config() };
    let (data, _) = load_data(&base).unwrap();
    let run = |expansion| {
        let cfg = TrainConfig { expansion, ..base.clone() };
        let mut state = TrainState::<f64>::init(&cfg, data.len()).unwrap();
        let mut rows: Vec<MetricsRow> = Vec::new();
        train(&mut state, &cfg, &data.images, None, &mut rows).unwrap();
        (rows, state.bank.rows().to_vec())
    };
    assert_eq!(run(Expansion::Multi), run(Expansion::Standard));
}
