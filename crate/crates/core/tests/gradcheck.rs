mod common;

use common::{primitive_max_err, Composite, PRIMITIVES};

const CASES: usize = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for &name in PRIMITIVES {
        let err = primitive_max_err(name, CASES);
        if err.is_nan() || err >= 1e-4 {
            failures.push(format!("{name}: {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn total_loss_matches_finite_differences() {
    for seed in 0..CASES as u64 {
        let err = Composite::new(seed, seed % 2 == 1).max_err(10, seed);
        assert!(err < 1e-3, "seed {seed}: {err:.3e}");
    }
}
