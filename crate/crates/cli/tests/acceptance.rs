//! Acceptance suite: every release criterion asserted at its stated
//! tolerance, one pass/fail line per criterion (visible with
//! `cargo test -p sync-mrac-cli --test acceptance -- --nocapture`).
//!
//! The underlying checks are shared with `sync-mrac check`; the suite runs
//! them once and each test asserts one outcome.

use std::sync::OnceLock;

use sync_mrac_cli::checks::{run_acceptance_checks, CheckOutcome};
use sync_mrac_cli::config::f16_default_config;

fn outcomes() -> &'static [CheckOutcome] {
    static SUITE: OnceLock<Vec<CheckOutcome>> = OnceLock::new();
    SUITE.get_or_init(|| {
        run_acceptance_checks(&f16_default_config(), 4).expect("acceptance suite runs")
    })
}

fn assert_criterion(id: usize) {
    let outcome = outcomes()
        .iter()
        .find(|o| o.id == id)
        .expect("criterion present in suite");
    println!("{}", outcome.render());
    assert!(outcome.passed, "{}", outcome.render());
}

#[test]
fn criterion_01_crm_equivalence() {
    assert_criterion(1);
}

#[test]
fn criterion_02_orm_equivalence() {
    assert_criterion(2);
}

#[test]
fn criterion_03_allocation_optimality() {
    assert_criterion(3);
}

#[test]
fn criterion_04_lyapunov_monotonicity() {
    assert_criterion(4);
}

#[test]
fn criterion_05_peaking_alleviation() {
    assert_criterion(5);
}

#[test]
fn criterion_06_oscillation_smoothing() {
    assert_criterion(6);
}

#[test]
fn criterion_07_learning_attenuation() {
    assert_criterion(7);
}

#[test]
fn criterion_08_observer_convergence() {
    assert_criterion(8);
}

#[test]
fn criterion_09_learning_convergence() {
    assert_criterion(9);
}

#[test]
fn criterion_10_numerics() {
    assert_criterion(10);
}

#[test]
fn criterion_11_grid_runtime() {
    assert_criterion(11);
}
