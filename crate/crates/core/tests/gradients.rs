//! Tape gradients of the full training loss against central differences.

mod common;

use std::time::Instant;

use common::{cases, check};

#[test]
fn total_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let cases = cases();
    assert!(cases.len() >= 20);
    for case in &cases {
        let err = check(case);
        assert!(
            err < 1e-4,
            "mode {:?} k {} n {} dim {}: max relative error {err:e}",
            case.mode,
            case.k,
            case.n,
            case.dim
        );
    }
    assert!(start.elapsed().as_secs() < 300);
}
