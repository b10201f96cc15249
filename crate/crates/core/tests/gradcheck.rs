mod common;

use common::gradcases::{loss_cases, primitive_cases, Case};
use common::grad_check;
use forgesem::gradcore::Real;

const PROBES: usize = 100;

// f32 forward rounding dominates differences of small gradients, so those
// are compared absolutely.

fn run_all<T: Real>(cases: Vec<Case<T>>, eps: f64, floor: f64, tol: f64) {
    let mut failures = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let r = grad_check(&c.inputs, &*c.f, PROBES, eps, floor, 1000 + i as u64);
        assert_eq!(r.probes, PROBES);
        if r.max_rel > tol {
            failures.push(format!("{}: {:.3e}", c.name, r.max_rel));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn primitives_f64() {
    run_all(primitive_cases::<f64>(), 1e-6, 1e-2, 1e-6);
}

#[test]
fn primitives_f32() {
    run_all(primitive_cases::<f32>(), 1e-3, 1.0, 1e-3);
}

#[test]
fn composed_losses_f64() {
    run_all(loss_cases::<f64>(), 1e-6, 1e-2, 1e-6);
}

#[test]
fn composed_losses_f32() {
    run_all(loss_cases::<f32>(), 1e-3, 1.0, 1e-3);
}
