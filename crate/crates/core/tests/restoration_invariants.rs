mod common;

#[test]
fn fifty_random_cases_hold_every_invariant() {
    let reports = common::restoration_invariant_cases(50, 2024);
    let failures: Vec<String> = reports
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|f| format!("case {} ({}): {f}", r.case, r.predictor)))
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
