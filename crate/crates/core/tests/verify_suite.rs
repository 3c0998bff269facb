//! The invariant suite must pass on a pristine build and must catch an
//! injected gradient fault.

use ssdet::verify::{run_all, FaultInjection};

#[test]
fn pristine_build_passes_every_check() {
    let results = run_all(FaultInjection::None);
    assert!(!results.is_empty());
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect();
    assert!(failures.is_empty(), "failed checks:\n{}", failures.join("\n"));
}

#[test]
fn injected_gradient_fault_is_detected() {
    let results = run_all(FaultInjection::Gradient);
    for name in ["tensor.gradients_op_level", "tensor.gradients_loss_level"] {
        let check = results
            .iter()
            .find(|r| r.name == name)
            .expect("check exists");
        assert!(!check.passed, "{name} must fail under fault injection");
        assert!(
            check.detail.contains("injected fault detected"),
            "{name} failed for the wrong reason: {}",
            check.detail
        );
    }
}
