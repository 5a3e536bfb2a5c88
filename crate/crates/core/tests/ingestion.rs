//! Hand-built CIFAR-10 binary fixtures and the CLI's exit codes.

use std::path::Path;
use std::process::Command;

use memdisc::cli::{EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_USAGE};
use memdisc::data::{load_cifar10, parse_cifar10, DataError, CIFAR10_RECORD};

/// Record with label `label` whose pixel bytes are `(offset + i) mod 256`.
fn record(label: u8, offset: usize) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..CIFAR10_RECORD - 1).map(|i| ((offset + i) % 256) as u8));
    r
}

#[test]
fn records_parse_bit_exactly() {
    let bytes = [record(3, 0), record(9, 17)].concat();
    let (pixels, labels) = parse_cifar10(Path::new("fixture"), &bytes).unwrap();
    assert_eq!(labels, [3, 9]);
    assert_eq!(pixels.len(), 2 * 3072);
    for (i, &p) in pixels.iter().enumerate() {
        let byte = bytes[(i / 3072) * CIFAR10_RECORD + 1 + i % 3072];
        assert_eq!(p, byte as f32 / 255.0);
    }
    // Planes are R, G, B, each row-major 32×32.
    assert_eq!(pixels[1024], 0.0);
    assert_eq!(pixels[2048], 0.0);
    assert_eq!(pixels[32], 32.0 / 255.0);
}

#[test]
fn malformed_files_are_rejected() {
    let path = Path::new("fixture");
    let short = record(1, 0)[..3072].to_vec();
    assert!(matches!(parse_cifar10(path, &short), Err(DataError::BadSize { len: 3072, .. })));
    assert!(matches!(parse_cifar10(path, &[]), Err(DataError::BadSize { len: 0, .. })));
    let bad = [record(1, 0), record(10, 0)].concat();
    assert!(matches!(
        parse_cifar10(path, &bad),
        Err(DataError::BadLabel { record: 1, label: 10, .. })
    ));
}

#[test]
fn directory_of_batches_loads_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("data_batch_1.bin"), [record(0, 0), record(1, 1)].concat()).unwrap();
    std::fs::write(dir.path().join("data_batch_2.bin"), record(2, 2)).unwrap();
    std::fs::write(dir.path().join("test_batch.bin"), record(5, 5)).unwrap();
    let set = load_cifar10(dir.path(), None, 0).unwrap();
    assert_eq!(set.len(), 3);
    let mut labels = set.labels.labels().to_vec();
    labels.sort();
    assert_eq!(labels, [0, 1, 2]);
}

fn memdisc(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_memdisc"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("short.bin"), &record(1, 0)[..3072]).unwrap();
    std::fs::write(d.join("badlabel.bin"), record(11, 0)).unwrap();
    let cifar = |name: &str| format!(r#"{{"dataset": "cifar10", "train_path": "{name}", "epochs": 0}}"#);
    std::fs::write(d.join("short.json"), cifar("short.bin")).unwrap();
    std::fs::write(d.join("badlabel.json"), cifar("badlabel.bin")).unwrap();
    std::fs::write(d.join("missing-data.json"), cifar("nope.bin")).unwrap();
    std::fs::write(d.join("unknown-key.json"), r#"{"epochs": 1, "colour": "red"}"#).unwrap();
    std::fs::write(d.join("bad-type.json"), r#"{"epochs": "many"}"#).unwrap();
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();

    let cases: [(&[&str], i32); 9] = [
        (&["train", "--config", "short.json", "--frobnicate"], EXIT_USAGE),
        (&["ablate", "--suite", "table3"], EXIT_USAGE),
        (&["train", "--config", "absent.json"], EXIT_IO),
        (&["train", "--config", "missing-data.json"], EXIT_IO),
        (&["train", "--config", "unknown-key.json"], EXIT_CONFIG),
        (&["train", "--config", "bad-type.json"], EXIT_CONFIG),
        (&["train", "--config", "short.json"], EXIT_DATA),
        (&["train", "--config", "badlabel.json"], EXIT_DATA),
        (&["eval-knn", "--ckpt", "junk.ckpt"], EXIT_CHECKPOINT),
    ];
    for (args, code) in cases {
        assert_eq!(memdisc(args, d).0, code, "{args:?}");
    }
    let codes = [EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT];
    let mut unique = codes.to_vec();
    unique.dedup();
    assert_eq!(unique.len(), codes.len());
    assert!(codes.iter().all(|&c| c != 0));
}

#[test]
fn bundled_config_trains_and_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic64.json");
    let (code, stdout) = memdisc(
        &["train", "--config", config.to_str().unwrap(), "--out", "run"],
        dir.path(),
    );
    assert_eq!(code, 0, "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(csv.starts_with(memdisc::metrics::HEADER));
    assert!(dir.path().join("run/e0001.ckpt").exists());
}
