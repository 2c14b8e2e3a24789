mod common;

use common::{fd_mismatch, loss_gradient_errors, network_gradient_errors, Instance, LOSS_FLOOR};
use deepbsde::schemes::{ds_target, loss_ds, regression_loss_grad, NextStep};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn network_gradients_match_finite_differences(seed in any::<u64>()) {
        let inst = Instance::random(seed);
        for (name, err) in network_gradient_errors(&inst, seed ^ 0x5eed) {
            prop_assert!(err <= 1e-5, "{name}: mismatch {err:e}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences(seed in any::<u64>()) {
        let inst = Instance::random(seed);
        for (name, err) in loss_gradient_errors(&inst) {
            prop_assert!(err <= 1e-4, "{name}: mismatch {err:e}");
        }
    }
}

#[test]
fn ds_update_ignores_the_frozen_next_network() {
    // pick an instance where the next step is a network
    let inst = (0..)
        .map(Instance::random)
        .find(|inst| inst.step + 1 < inst.n())
        .unwrap();
    let m = inst.model.as_ref();
    let i = inst.step;
    let p = &inst.paths;
    let next = &inst.u[i + 1];
    let mut moved = next.clone();
    moved.as_mut_slice().iter_mut().for_each(|v| *v += 0.05);
    let before = loss_ds(m, &inst.u_cand, NextStep::Network(next), p, i).unwrap();
    let after = loss_ds(m, &inst.u_cand, NextStep::Network(&moved), p, i).unwrap();
    assert!((before - after).abs() > 1e-8, "loss should depend on the next network");

    // the regression gradient only involves θ_i
    let target = ds_target(m, NextStep::Network(next), p, i).unwrap();
    let (loss, du) = regression_loss_grad(&inst.u_cand, target.view(), p.states_at(i)).unwrap();
    assert!((loss - before).abs() <= 1e-14 * (1.0 + before));
    assert_eq!(du.len(), inst.u_cand.len());
    let err = fd_mismatch(&inst.u_cand, &du, LOSS_FLOOR, |u| loss_ds(m, u, NextStep::Network(next), p, i).unwrap());
    assert!(err <= 1e-4, "mismatch {err:e}");
}
