mod common;

#[test]
fn analytic_gradients_match_finite_differences() {
    for (name, err, tol) in common::gradient_suite(11, 25) {
        assert!(err < tol, "{name}: error {err:e}, bound {tol:e}");
    }
}
