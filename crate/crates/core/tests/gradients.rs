mod common;

use common::*;
use motdrive::experts::Model;

fn check(kind: LossKind, draw: f64, seed: u64) {
    let mut m = Model::new(small_config(), seed).unwrap();
    randomize(&mut m.store, 0.3, seed + 1);
    let fx = loss_fixture(&m, seed, draw);
    for c in grad_check(&mut m, &fx, kind, 3, seed + 2) {
        assert!(c.max_rel < 1e-3, "{kind:?} {}: rel err {:.2e}", c.tensor, c.max_rel);
    }
}

#[test]
fn understanding_loss_gradients() {
    check(LossKind::Understanding, 0.0, 3);
}

#[test]
fn planning_loss_gradients() {
    check(LossKind::Planning, 0.0, 4);
}

#[test]
fn generation_loss_gradients_with_estimated_action() {
    check(LossKind::Generation, 0.2, 5);
}

#[test]
fn generation_loss_gradients_with_clean_action() {
    check(LossKind::Generation, 0.9, 6);
}
