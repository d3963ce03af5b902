mod common;

use common::{GRAD_CASES, TOLERANCE};

#[test]
fn every_op_block_and_loss_matches_finite_differences() {
    for &(name, case) in GRAD_CASES {
        for seed in 0..3 {
            let err = case(seed).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            assert!(err < TOLERANCE, "{name} seed {seed}: relative error {err:e}");
        }
    }
}
