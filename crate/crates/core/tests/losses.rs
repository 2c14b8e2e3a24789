mod common;

use std::sync::Arc;

use common::{dbsde_terminal_y, loss_oracle_errors, tanh_arch, Instance};
use deepbsde::neuralnet::NetworkParams;
use deepbsde::schemes::{loss_dbdp1, loss_dbdp2, loss_dbsde, loss_ds, loss_mdbdp, NetworkSteps, NextStep};
use deepbsde::stochastics::{simulate_paths, Model, ModelSpec, TimeGrid};
use proptest::prelude::*;

fn constant_net(d: usize, out: usize, c: f64) -> NetworkParams {
    let mut p = NetworkParams::zeros(&tanh_arch(d, vec![4], out));
    let last = p.n_layers() - 1;
    p.bias_mut(last).fill(c);
    p
}

/// `x ↦ x` on `R^1` as a network without hidden layers.
fn identity_net() -> NetworkParams {
    let mut p = NetworkParams::zeros(&tanh_arch(1, vec![], 1));
    p.weight_mut(0).fill(1.0);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_match_per_path_oracles(seed in any::<u64>()) {
        let inst = Instance::random(seed);
        for (name, err) in loss_oracle_errors(&inst) {
            prop_assert!(err <= 1e-12, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn dbsde_last_gradient_shift_moves_mismatch_by_increment(seed in any::<u64>()) {
        let mut inst = Instance::random(seed);
        // generator without z-dependence
        let mut m = (*inst.model).clone();
        m.gen_b = 0.0;
        m.gen_c.iter_mut().for_each(|c| *c = 0.0);
        inst.model = Arc::new(m);
        let n = inst.n();
        let v: Vec<f64> = (0..inst.model.d).map(|j| 0.3 - 0.2 * j as f64).collect();
        for k in 0..inst.paths.batch_size() {
            let g = inst.model.terminal(&inst.paths.state(k, n).to_vec());
            let before = g - dbsde_terminal_y(&inst, k, None);
            let after = g - dbsde_terminal_y(&inst, k, Some(&v));
            let vdw: f64 = v.iter().zip(inst.paths.increment(k, n - 1)).map(|(a, b)| a * b).sum();
            prop_assert!((after - before + vdw).abs() <= 1e-12 * (1.0 + before.abs()));
        }
        // the library loss agrees: L(v) - L(0) = mean(a² - 2 m a), a = v·ΔW_{N-1}
        let base = loss_dbsde(inst.model.as_ref(), &inst.u_cand, &inst.z, &inst.paths).unwrap();
        let mut shifted = inst.z.clone();
        let last = shifted[n - 1].n_layers() - 1;
        shifted[n - 1].bias_mut(last).iter_mut().zip(&v).for_each(|(b, s)| *b += s);
        let moved = loss_dbsde(inst.model.as_ref(), &inst.u_cand, &shifted, &inst.paths).unwrap();
        let k = inst.paths.batch_size();
        let expected: f64 = (0..k)
            .map(|p| {
                let g = inst.model.terminal(&inst.paths.state(p, n).to_vec());
                let mis = g - dbsde_terminal_y(&inst, p, None);
                let a: f64 = v.iter().zip(inst.paths.increment(p, n - 1)).map(|(a, b)| a * b).sum();
                a * a - 2.0 * mis * a
            })
            .sum::<f64>()
            / k as f64;
        prop_assert!((moved - base - expected).abs() <= 1e-10 * (1.0 + base.abs()));
    }
}

fn constant_terminal_model(d: usize, c: f64) -> ModelSpec {
    ModelSpec::new(d, 1.0).with_terminal(move |_| c)
}

#[test]
fn constant_solutions_have_zero_loss() {
    let d = 2;
    let c = 1.7;
    let model = constant_terminal_model(d, c);
    let grid = TimeGrid::uniform(1.0, 3).unwrap();
    let paths = simulate_paths(&model, &grid, &[0.3, -0.2], 16, 5).unwrap();
    let u: Vec<_> = (0..3).map(|_| Some(constant_net(d, 1, c))).collect();
    let z: Vec<_> = (0..3).map(|_| Some(constant_net(d, d, 0.0))).collect();
    let frozen = NetworkSteps { u: &u, z: &z };
    let uc = constant_net(d, 1, c);
    let zc = constant_net(d, d, 0.0);
    for i in 0..3 {
        assert_eq!(loss_mdbdp(&model, &uc, &zc, &frozen, &paths, i).unwrap(), 0.0);
        let next = if i == 2 { NextStep::Terminal } else { NextStep::Network(u[i + 1].as_ref().unwrap()) };
        assert_eq!(loss_dbdp1(&model, &uc, &zc, next, &paths, i).unwrap(), 0.0);
    }
    let zs: Vec<_> = z.into_iter().flatten().collect();
    assert_eq!(loss_dbsde(&model, &uc, &zs, &paths).unwrap(), 0.0);
}

#[test]
fn frozen_dynamics_give_zero_dbdp2_and_ds_loss() {
    let c = -0.4;
    let model = constant_terminal_model(1, c).with_diffusion(|_, _| vec![0.0]);
    let grid = TimeGrid::uniform(1.0, 2).unwrap();
    let paths = simulate_paths(&model, &grid, &[0.9], 8, 1).unwrap();
    let next = constant_net(1, 1, c);
    let uc = constant_net(1, 1, c);
    assert_eq!(loss_dbdp2(&model, &uc, NextStep::Network(&next), &paths, 0).unwrap(), 0.0);
    assert_eq!(loss_ds(&model, &uc, NextStep::Network(&next), &paths, 0).unwrap(), 0.0);
}

#[test]
fn dbdp2_identity_cancels_martingale_increment() {
    let model = ModelSpec::new(1, 1.0).with_terminal(|x| x[0]);
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let paths = simulate_paths(&model, &grid, &[0.25], 100_000, 11).unwrap();
    let loss = loss_dbdp2(&model, &identity_net(), NextStep::Terminal, &paths, 3).unwrap();
    assert!(loss < 1e-25, "loss {loss:e}");
}

#[test]
fn dbdp1_constant_z_error_costs_its_square_times_dt() {
    let model = ModelSpec::new(1, 1.0).with_terminal(|x| x[0]);
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let k = 100_000;
    let paths = simulate_paths(&model, &grid, &[0.0], k, 3).unwrap();
    let kappa = 0.3;
    let z = constant_net(1, 1, 1.0 + kappa);
    let loss = loss_dbdp1(&model, &identity_net(), &z, NextStep::Terminal, &paths, 3).unwrap();
    let expected = kappa * kappa * grid.dt(3);
    // mean of κ²ΔW² has relative standard error √(2/K)
    let tol = 5.0 * (2.0 / k as f64).sqrt();
    assert!((loss / expected - 1.0).abs() < tol, "loss {loss}, expected {expected}");
}

#[test]
fn kernels_reject_out_of_range_steps() {
    let inst = Instance::random(7);
    let m = inst.model.as_ref();
    let n = inst.n();
    let u: Vec<_> = inst.u.iter().cloned().map(Some).collect();
    let z: Vec<_> = inst.z.iter().cloned().map(Some).collect();
    let frozen = NetworkSteps { u: &u, z: &z };
    assert!(loss_mdbdp(m, &inst.u_cand, &inst.z_cand, &frozen, &inst.paths, n).is_err());
    assert!(loss_dbdp1(m, &inst.u_cand, &inst.z_cand, NextStep::Terminal, &inst.paths, n).is_err());
    assert!(loss_dbsde(m, &inst.u_cand, &inst.z[..n - 1], &inst.paths).is_err());
}
