//! Identical inputs give identical bytes: metrics CSVs and resumed checkpoints.

use std::process::Command;

use memdisc::checkpoint::{AnyCheckpoint, Checkpoint};
use memdisc::config::TrainConfig;
use memdisc::losses::ConsistencyMode;
use memdisc::metrics::{CsvMetrics, MetricsRow};
use memdisc::train::{load_data, run_epochs, train, Monitor, TrainState};

fn config() -> TrainConfig {
    TrainConfig {
        synthetic_classes: 3,
        synthetic_per_class: 10,
        synthetic_test_per_class: 4,
        synthetic_size: 8,
        embed_dim: 8,
        k: 2,
        batch_size: 8,
        epochs: 4,
        lr_decay_epochs: vec![2, 3],
        consistency: ConsistencyMode::Kl,
        beta: 1.0,
        eval_every: 2,
        eval_knn_k: 5,
        ..TrainConfig::default()
    }
}

fn run_to_csv(cfg: &TrainConfig, path: &std::path::Path) {
    let (data, test) = load_data(cfg).unwrap();
    let test = test.unwrap();
    let monitor = Monitor {
        train_labels: &data.labels,
        test: &test,
    };
    let mut state = TrainState::<f32>::init(cfg, data.len()).unwrap();
    let mut sink = CsvMetrics::open(path).unwrap();
    train(&mut state, cfg, &data.images, Some(&monitor), &mut sink).unwrap();
}

#[test]
fn identical_runs_write_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run_to_csv(&config(), &a);
    run_to_csv(&config(), &b);
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(a.len() > 200);
    assert_eq!(a, b);
}

#[test]
fn resumed_training_is_bit_exact() {
    let cfg = config();
    let (data, _) = load_data(&cfg).unwrap();

    let mut straight = TrainState::<f32>::init(&cfg, data.len()).unwrap();
    let mut straight_rows: Vec<MetricsRow> = Vec::new();
    train(&mut straight, &cfg, &data.images, None, &mut straight_rows).unwrap();

    let mut first = TrainState::<f32>::init(&cfg, data.len()).unwrap();
    let mut rows: Vec<MetricsRow> = Vec::new();
    run_epochs(&mut first, &cfg, &data.images, None, &mut rows, 2).unwrap();
    let bytes = Checkpoint {
        config: cfg.clone(),
        state: first,
    }
    .to_bytes();
    let mut resumed = Checkpoint::<f32>::from_bytes(&bytes).unwrap().state;
    train(&mut resumed, &cfg, &data.images, None, &mut rows).unwrap();

    assert_eq!(rows, straight_rows);
    let finish = |state| Checkpoint { config: cfg.clone(), state }.to_bytes();
    assert_eq!(finish(resumed), finish(straight));
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let cfg = TrainConfig { epochs: 0, ..config() };
    let (data, _) = load_data(&cfg).unwrap();
    let init = TrainState::<f32>::init(&cfg, data.len()).unwrap();
    let mut state = init.clone();
    train(&mut state, &cfg, &data.images, None, &mut Vec::<MetricsRow>::new()).unwrap();
    let bytes = |state| Checkpoint { config: cfg.clone(), state }.to_bytes();
    assert_eq!(bytes(state), bytes(init));
}

#[test]
fn cli_resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, config().to_json()).unwrap();
    let bin = env!("CARGO_BIN_EXE_memdisc");
    let train = |out: &str, resume: Option<&std::path::Path>| {
        let mut cmd = Command::new(bin);
        cmd.arg("train").arg("--config").arg(&cfg_path).arg("--out").arg(dir.path().join(out));
        if let Some(r) = resume {
            cmd.arg("--resume").arg(r);
        }
        let status = cmd.output().unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    train("full", None);
    train("again", None);
    train("resumed", Some(&dir.path().join("full/e0002.ckpt")));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("full/last.ckpt"), read("resumed/last.ckpt"));
    assert_eq!(read("full/metrics.csv"), read("again/metrics.csv"));
    let AnyCheckpoint::F32(last) = AnyCheckpoint::load(&dir.path().join("full/last.ckpt")).unwrap() else {
        panic!("expected f32 checkpoint");
    };
    assert_eq!(last.state.epoch, 4);
}
