mod common;

use common::grad_cases::cases;
use nepqa_core::nn::gradcheck::check_gradients;

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..5 {
        for case in cases(seed) {
            let report = check_gradients(&case.store, &case.loss, 1e-4).unwrap();
            let (worst, err) = report.worst().unwrap();
            assert!(err < 1e-4, "seed {seed} {}: {worst} rel err {err:e}", case.name);
        }
    }
}
