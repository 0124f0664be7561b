mod common;

use common::gradcheck::{gradient_suite, TOLERANCE};

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    for (name, err) in gradient_suite() {
        if !(err < TOLERANCE) {
            failures.push(format!("{name}: {err:e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}
