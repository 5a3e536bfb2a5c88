"""Smoke test for the memdisc Python extension.

Build with `cargo build --release -p memdisc-py` and copy
target/release/libmemdisc.so next to this file as memdisc.so, or install
with `pip install ./crates/python`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import memdisc  # noqa: E402


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    cfg = memdisc.TrainConfig(
        '{"synthetic_classes": 4, "synthetic_per_class": 8, "synthetic_test_per_class": 4,'
        ' "synthetic_size": 16, "embed_dim": 16, "k": 2, "batch_size": 8, "epochs": 2,'
        ' "lr_decay_epochs": [], "eval_every": 1, "eval_knn_k": 4, "precision": "f64"}'
    )
    assert memdisc.TrainConfig(cfg.to_json()).to_json() == cfg.to_json()
    try:
        memdisc.TrainConfig('{"no_such_key": 1}')
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    bank = memdisc.MemoryBank.random(6, 4, momentum=0.5, seed=1)
    assert bank.n == 6 and bank.dim == 4 and len(bank.rows()) == 6
    assert bank.max_norm_deviation() < 1e-12
    bank.update(0, [[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    assert close(sum(x * x for x in bank.row(0)), 1.0)

    groups = memdisc.GroupTable(6)
    assert groups.union(4, 2) and groups.root(4) == 2
    assert groups.group_of(4) == [2, 4] and groups.group_count == 5
    bank.update_group(groups, 4, [[0.0, 1.0, 0.0, 0.0]])
    assert bank.row(2) == bank.row(4)

    p = memdisc.instance_probs(bank.row(0), bank, 0.07)
    assert close(sum(p), 1.0)
    assert memdisc.kl_consistency([p, p]) == 0.0
    assert close(memdisc.l2_consistency([[1.0, 0.0], [0.0, 1.0]]), 2.0)
    ce = memdisc.batch_ce([bank.row(0), bank.row(0)], [0], 2, memdisc.GroupTable(6), bank, 0.07)
    assert ce > 0.0 and math.isfinite(ce)

    dup = memdisc.MemoryBank.from_rows([[1, 0, 0], [1, 0.01, 0], [0, 1, 0], [0, 0, 1]])
    merged, report = memdisc.merge(dup, memdisc.GroupTable(4), sigma=1e-3, neighbors=3)
    assert merged.root(1) == 0 and merged.group_count == 3, report
    fresh = memdisc.MemoryBank.from_rows([[1, 0, 0], [1, 0.01, 0], [0, 1, 0], [0, 0, 1]])
    sigma, frac, reached = memdisc.calibrate_sigma(fresh, memdisc.GroupTable(4), (0.4, 0.6), 3)
    assert sigma > 0.0 and reached and close(frac, 0.5)

    train = [[1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9]]
    assert memdisc.knn_classify(train, [0, 0, 1, 1], [[1, 0.05], [0.05, 1]], k=2) == [0, 1]
    recalls = dict(memdisc.recall_at_k(train, [0, 0, 1, 1], [1, 2]))
    assert recalls[1] == 1.0
    assert 0.0 <= memdisc.nmi(train, [0, 0, 1, 1], seed=0) <= 1.0 + 1e-12

    record = bytes([3]) + bytes(range(256)) * 12
    pixels, labels = memdisc.parse_cifar10(record)
    assert labels == [3] and len(pixels) == 3072
    try:
        memdisc.parse_cifar10(record[:-1])
        raise AssertionError("truncated record accepted")
    except ValueError:
        pass

    ckpt, rows = memdisc.train(cfg)
    assert ckpt.epoch == 2 and len(rows) >= 2, rows
    assert ckpt.bank().max_norm_deviation() < 1e-9
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        ckpt.save(path)
        again = memdisc.Checkpoint.load(path)
        assert again.epoch == 2 and again.bank().rows() == ckpt.bank().rows()
        assert again.config.to_json() == cfg.to_json()
    try:
        memdisc.Checkpoint.load("/nonexistent/model.ckpt")
        raise AssertionError("missing checkpoint loaded")
    except OSError:
        pass

    print("smoke test passed:", rows[-1])


if __name__ == "__main__":
    main()
