use docvit::gradsuite::{composite_cases, op_cases, run_case, CaseFn, TOLERANCE};

fn check_all(cases: Vec<(&'static str, CaseFn)>) {
    let mut failures = Vec::new();
    for (name, case) in cases {
        match run_case(name, case, 20) {
            Ok(err) if err < TOLERANCE => {}
            Ok(err) => failures.push(format!("{name}: max relative error {err:.2e}")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn every_op_matches_finite_differences() {
    check_all(op_cases());
}

#[test]
fn every_composite_loss_matches_finite_differences() {
    check_all(composite_cases());
}
