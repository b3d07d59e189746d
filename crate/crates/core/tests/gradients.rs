#[path = "common/gradcheck.rs"]
mod gradcheck;

use gradcheck::{cases, check, TOLERANCE};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for case in cases() {
        for seed in 0..10 {
            let err = check(&case, seed).unwrap();
            if err.is_nan() || err >= TOLERANCE {
                failures.push(format!("{} seed {seed}: {err:.3e}", case.name));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
