mod support {
    pub mod equivalence;
}

use support::equivalence::*;

#[test]
fn td3_population_matches_members_run_alone() {
    let d = td3_vectorized_vs_sequential(4, 100, 7);
    assert!(d <= 1e-10, "max |Δ| = {d:e}");
}

#[test]
fn sac_population_matches_members_run_alone() {
    let d = sac_vectorized_vs_sequential(4, 100, 8);
    assert!(d <= 1e-10, "max |Δ| = {d:e}");
}

#[test]
fn k_steps_equal_chained_single_steps() {
    let r = k_step(4, 50, 3, 9);
    assert!(r.bitwise_equal);
    assert!(
        r.k_call < r.chained_with_export,
        "{:?} vs {:?}",
        r.k_call,
        r.chained_with_export
    );
}
