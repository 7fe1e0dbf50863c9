//! Finite-difference validation of every tape op and the composed blocks.
//! The full joint-model check lives in the acceptance suite.

use vsr_core::gradcheck::{assert_report, suite};

#[test]
fn every_elementary_op_passes_finite_differences() {
    for result in suite::elementary_ops(2024).unwrap() {
        assert_report(&result.report, result.name);
    }
}

#[test]
fn composed_blocks_pass_finite_differences() {
    for result in suite::composed_blocks(2025).unwrap() {
        assert_report(&result.report, result.name);
    }
}
