mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for (name, err) in common::gradients::all_cases() {
        assert!(err < 1e-3, "{name}: relative error {err:.3e}");
        assert!(err < 1e-5, "{name}: relative error {err:.3e} is suspiciously loose for f64");
    }
}
