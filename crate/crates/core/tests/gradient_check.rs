mod common;

use common::{objective_gradient_error, source_ce_gradient_error};

const TOL: f64 = 1e-4;

#[test]
fn smoothed_cross_entropy_gradients_match_finite_differences() {
    for instance in 0..10 {
        let err = source_ce_gradient_error(instance);
        assert!(err < TOL, "instance {instance}: relative error {err:e}");
    }
}

#[test]
fn adaptation_objective_gradients_match_finite_differences() {
    for instance in 0..10 {
        let err = objective_gradient_error(instance);
        assert!(err < TOL, "instance {instance}: relative error {err:e}");
    }
}
