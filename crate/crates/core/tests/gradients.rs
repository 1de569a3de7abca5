mod support;

use lgn_core::model::ModelVariant;

#[test]
fn spatiotemporal_cell_matches_finite_differences() {
    let err = support::gradcheck_st_cell();
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn two_step_two_layer_stack_matches_finite_differences() {
    let err = support::gradcheck_stp_net();
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn memory_read_matches_finite_differences() {
    let err = support::gradcheck_memory_read();
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn losses_match_finite_differences() {
    let [int, com, sep, total] = support::gradcheck_losses();
    for (name, err) in [("intensity", int), ("compactness", com), ("separateness", sep), ("total", total)] {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn every_variant_backpropagates_end_to_end() {
    for v in ModelVariant::ALL {
        for (name, err) in support::gradcheck_end_to_end(v, 4) {
            assert!(err < 1e-3, "{v} {name}: relative error {err:e}");
        }
    }
}
