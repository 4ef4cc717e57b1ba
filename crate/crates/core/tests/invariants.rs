use s2rm_core::suites::{
    ablation_checks, attention_checks, gate_checks, oracle_equivalence, run_suites,
    shape_contracts, shift_laws, Check, Status, ORACLE_INSTANCES,
};

fn assert_all_pass(checks: &[Check]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert_eq!(c.status, Status::Pass, "{c:?}");
    }
}

#[test]
fn shift_laws_are_bit_exact() {
    assert_all_pass(&shift_laws().unwrap());
}

#[test]
fn kernels_and_pipeline_match_oracles() {
    let checks = oracle_equivalence(7, ORACLE_INSTANCES).unwrap();
    assert_eq!(checks.len(), 5);
    assert_all_pass(&checks);
}

#[test]
fn shapes_attention_and_gates() {
    assert_all_pass(&shape_contracts().unwrap());
    assert_all_pass(&attention_checks().unwrap());
    assert_all_pass(&gate_checks().unwrap());
}

#[test]
fn every_ablation_runs_and_changes_the_output() {
    let checks = ablation_checks().unwrap();
    assert_eq!(checks.len(), 11);
    assert_all_pass(&checks);
}

#[test]
fn filter_keeps_matching_names_only() {
    let checks = run_suites(Some("shift"), 0).unwrap();
    assert_eq!(checks.len(), 6);
    assert!(checks.iter().all(|c| c.name.starts_with("shift.")));
}
