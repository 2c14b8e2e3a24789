//! Fixtures shared by the integration tests: a small nonlinear model with
//! hand-written derivatives, random tiny instances, straight-line per-path
//! loss oracles and a central finite-difference checker.
#![allow(dead_code)]

use std::sync::Arc;

use deepbsde::neuralnet::{forward, grad_input, grad_params, Activation, Architecture, NetworkParams};
use deepbsde::schemes::{
    dbdp2_loss_grad, dbsde_loss_grad, ds_target, local_loss_grad, loss_dbdp1, loss_dbdp2, loss_dbsde, loss_ds,
    loss_mdbdp, mdbdp_target, next_values, regression_loss_grad, NetworkSteps, NextStep,
};
use deepbsde::stochastics::{simulate_paths, Model, PathBatch, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// State-dependent drift and diffusion, a generator nonlinear in `y` and
/// `z`, and a `C¹` terminal function.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub d: usize,
    pub horizon: f64,
    pub drift_a: Vec<f64>,
    /// Constant part of `σ`, row-major.
    pub sigma0: Vec<f64>,
    /// Coefficient of the `cos(x_j)` term on the diagonal of `σ`.
    pub sigma_x: f64,
    pub gen_a: f64,
    pub gen_b: f64,
    pub gen_c: Vec<f64>,
    pub gen_e: f64,
}

impl ToyModel {
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let mut sigma0 = vec![0.0; d * d];
        for (idx, s) in sigma0.iter_mut().enumerate() {
            *s = if idx / d == idx % d { 1.0 } else { rng.random_range(-0.3..0.3) };
        }
        Self {
            d,
            horizon: rng.random_range(0.5..1.5),
            drift_a: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sigma0,
            sigma_x: rng.random_range(-0.2..0.2),
            gen_a: rng.random_range(-0.5..0.5),
            gen_b: rng.random_range(-0.5..0.5),
            gen_c: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            gen_e: rng.random_range(-1.0..1.0),
        }
    }

    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.sigma0.clone();
        for j in 0..self.d {
            s[j * self.d + j] += self.sigma_x * x[j].cos();
        }
        s
    }
}

impl Model for ToyModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for j in 0..self.d {
            out[j] = self.drift_a[j] * x[j].sin() + 0.1 * t;
        }
    }

    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma(x));
    }

    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let zsum: f64 = z.iter().sum();
        let cz: f64 = self.gen_c.iter().zip(z).map(|(c, z)| c * z).sum();
        let xsum: f64 = x.iter().sum();
        self.gen_a * y + self.gen_b * y.sin() * zsum + cz + self.gen_e * (t + xsum).cos()
    }

    fn generator_with_grad(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        let zsum: f64 = z.iter().sum();
        for j in 0..self.d {
            dz[j] = self.gen_b * y.sin() + self.gen_c[j];
        }
        (self.generator(t, x, y, z), self.gen_a + self.gen_b * y.cos() * zsum)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        let xsum: f64 = x.iter().sum();
        xsum.sin() + 0.5 * x.iter().map(|v| v * v).sum::<f64>() / self.d as f64
    }

    fn terminal_grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        let xsum: f64 = x.iter().sum();
        Some(x.iter().map(|v| xsum.cos() + v / self.d as f64).collect())
    }
}

pub fn tanh_arch(input: usize, hidden: Vec<usize>, output: usize) -> Architecture {
    Architecture::new(input, hidden, output, Activation::Tanh).unwrap()
}

/// Parameters drawn uniformly on `[-scale, scale]`.
pub fn random_params(arch: &Architecture, scale: f64, rng: &mut impl Rng) -> NetworkParams {
    let data = (0..arch.n_params()).map(|_| rng.random_range(-scale..scale)).collect();
    NetworkParams::from_flat(arch, data).unwrap()
}

/// A random tiny problem: `d ≤ 3`, `N ≤ 3`, `K ≤ 8`, non-uniform grid.
pub struct Instance {
    pub model: Arc<ToyModel>,
    pub grid: TimeGrid,
    pub paths: PathBatch,
    pub u: Vec<NetworkParams>,
    pub z: Vec<NetworkParams>,
    /// Candidate networks for the step under test.
    pub u_cand: NetworkParams,
    pub z_cand: NetworkParams,
    pub step: usize,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=3);
        let n = rng.random_range(1..=3);
        let k = rng.random_range(1..=8);
        Self::with_sizes(d, n, k, &mut rng)
    }

    pub fn with_sizes(d: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let model = Arc::new(ToyModel::random(d, rng));
        let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.05..0.95)).collect();
        cuts.sort_by(f64::total_cmp);
        let mut times = vec![0.0];
        times.extend(cuts.iter().map(|c| c * model.horizon));
        times.push(model.horizon);
        let grid = TimeGrid::from_times(times).unwrap();
        let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let paths = simulate_paths(model.as_ref(), &grid, &x0, k, rng.random()).unwrap();
        let ua = tanh_arch(d, vec![3], 1);
        let za = tanh_arch(d, vec![3], d);
        let u = (0..n).map(|_| random_params(&ua, 0.8, rng)).collect();
        let z = (0..n).map(|_| random_params(&za, 0.8, rng)).collect();
        let u_cand = random_params(&ua, 0.8, rng);
        let z_cand = random_params(&za, 0.8, rng);
        let step = rng.random_range(0..n);
        Self {
            model,
            grid,
            paths,
            u,
            z,
            u_cand,
            z_cand,
            step,
        }
    }

    pub fn n(&self) -> usize {
        self.grid.n_steps()
    }
}

/// Value and Jacobian (`out × in`) of a tanh network, straight from the
/// layer weights.
pub fn net_eval(p: &NetworkParams, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(p.arch().activation, Activation::Tanh);
    let nl = p.n_layers();
    let mut h = x.to_vec();
    let mut jac: Vec<Vec<f64>> = (0..x.len())
        .map(|r| (0..x.len()).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    for l in 0..nl {
        let w = p.weight(l);
        let b = p.bias(l);
        let (rows, cols) = w.dim();
        let mut z = vec![0.0; rows];
        let mut jz = vec![vec![0.0; x.len()]; rows];
        for r in 0..rows {
            z[r] = b[r];
            for c in 0..cols {
                z[r] += w[[r, c]] * h[c];
                for m in 0..x.len() {
                    jz[r][m] += w[[r, c]] * jac[c][m];
                }
            }
        }
        if l + 1 < nl {
            for r in 0..rows {
                z[r] = z[r].tanh();
                let s = 1.0 - z[r] * z[r];
                jz[r].iter_mut().for_each(|v| *v *= s);
            }
        }
        h = z;
        jac = jz;
    }
    (h, jac)
}

pub fn value(p: &NetworkParams, x: &[f64]) -> f64 {
    net_eval(p, x).0[0]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// `σ(t, x)ᵀ v` with `σ` read from the model.
fn sigma_t(model: &dyn Model, t: f64, x: &[f64], v: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut s = vec![0.0; d * d];
    model.diffusion(t, x, &mut s);
    (0..d).map(|c| (0..d).map(|r| s[r * d + c] * v[r]).sum()).collect()
}

fn state(paths: &PathBatch, k: usize, j: usize) -> Vec<f64> {
    paths.state(k, j).to_vec()
}

fn incr(paths: &PathBatch, k: usize, j: usize) -> Vec<f64> {
    paths.increment(k, j).to_vec()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Residual of the one-step relation for a single path.
fn one_step_residual(model: &dyn Model, grid: &TimeGrid, target: f64, x: &[f64], dw: &[f64], u: f64, z: &[f64], i: usize) -> f64 {
    target - u - model.generator(grid.t(i), x, u, z) * grid.dt(i) - dot(z, dw)
}

pub fn oracle_mdbdp(inst: &Instance, i: usize) -> f64 {
    let (m, g, p) = (inst.model.as_ref(), &inst.grid, &inst.paths);
    let n = g.n_steps();
    mean((0..p.batch_size()).map(|k| {
        let mut target = m.terminal(&state(p, k, n));
        for j in i + 1..n {
            let x = state(p, k, j);
            let u = value(&inst.u[j], &x);
            let z = net_eval(&inst.z[j], &x).0;
            target -= m.generator(g.t(j), &x, u, &z) * g.dt(j) + dot(&z, &incr(p, k, j));
        }
        let x = state(p, k, i);
        let u = value(&inst.u_cand, &x);
        let z = net_eval(&inst.z_cand, &x).0;
        one_step_residual(m, g, target, &x, &incr(p, k, i), u, &z, i).powi(2)
    }))
}

fn next_value(inst: &Instance, i: usize, x: &[f64]) -> (f64, Vec<f64>) {
    if i + 1 == inst.n() {
        (inst.model.terminal(x), inst.model.terminal_grad(x).unwrap())
    } else {
        let (v, j) = net_eval(&inst.u[i + 1], x);
        (v[0], j[0].clone())
    }
}

pub fn oracle_dbdp1(inst: &Instance, i: usize) -> f64 {
    let (m, g, p) = (inst.model.as_ref(), &inst.grid, &inst.paths);
    mean((0..p.batch_size()).map(|k| {
        let target = next_value(inst, i, &state(p, k, i + 1)).0;
        let x = state(p, k, i);
        let u = value(&inst.u_cand, &x);
        let z = net_eval(&inst.z_cand, &x).0;
        one_step_residual(m, g, target, &x, &incr(p, k, i), u, &z, i).powi(2)
    }))
}

pub fn oracle_dbdp2(inst: &Instance, i: usize) -> f64 {
    let (m, g, p) = (inst.model.as_ref(), &inst.grid, &inst.paths);
    mean((0..p.batch_size()).map(|k| {
        let target = next_value(inst, i, &state(p, k, i + 1)).0;
        let x = state(p, k, i);
        let (u, jac) = net_eval(&inst.u_cand, &x);
        let z = sigma_t(m, g.t(i), &x, &jac[0]);
        one_step_residual(m, g, target, &x, &incr(p, k, i), u[0], &z, i).powi(2)
    }))
}

pub fn oracle_ds(inst: &Instance, i: usize) -> f64 {
    let (m, g, p) = (inst.model.as_ref(), &inst.grid, &inst.paths);
    mean((0..p.batch_size()).map(|k| {
        let x0 = state(p, k, i);
        let x1 = state(p, k, i + 1);
        let (v, grad) = next_value(inst, i, &x1);
        let z = sigma_t(m, g.t(i), &x0, &grad);
        let target = v - m.generator(g.t(i), &x1, v, &z) * g.dt(i);
        (target - value(&inst.u_cand, &x0)).powi(2)
    }))
}

/// Forward rollout from `u_cand` with the instance's `z` networks.
pub fn oracle_dbsde(inst: &Instance) -> f64 {
    let (m, g, p) = (inst.model.as_ref(), &inst.grid, &inst.paths);
    let n = g.n_steps();
    mean((0..p.batch_size()).map(|k| (dbsde_terminal_y(inst, k, None) - m.terminal(&state(p, k, n))).powi(2)))
}

/// `Y_N` of path `k`, optionally adding a constant vector to `Z_{N-1}`.
pub fn dbsde_terminal_y(inst: &Instance, k: usize, shift_last: Option<&[f64]>) -> f64 {
    let (m, g, p) = (inst.model.as_ref(), &inst.grid, &inst.paths);
    let n = g.n_steps();
    let mut y = value(&inst.u_cand, &state(p, k, 0));
    for i in 0..n {
        let x = state(p, k, i);
        let mut z = net_eval(&inst.z[i], &x).0;
        if let (Some(v), true) = (shift_last, i + 1 == n) {
            z.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        y += m.generator(g.t(i), &x, y, &z) * g.dt(i) + dot(&z, &incr(p, k, i));
    }
    y
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest componentwise disagreement between `analytic` and central finite
/// differences of `loss` around `params`, relative to
/// `max(|analytic|, |fd|, floor)`.
pub fn fd_mismatch(params: &NetworkParams, analytic: &NetworkParams, floor: f64, loss: impl Fn(&NetworkParams) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..params.len() {
        let mut p = params.clone();
        p.as_mut_slice()[idx] += h;
        let lp = loss(&p);
        p.as_mut_slice()[idx] -= 2.0 * h;
        let lm = loss(&p);
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic.as_slice()[idx];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

fn frozen_steps(inst: &Instance) -> (Vec<Option<NetworkParams>>, Vec<Option<NetworkParams>>) {
    (
        inst.u.iter().cloned().map(Some).collect(),
        inst.z.iter().cloned().map(Some).collect(),
    )
}

fn next_step(inst: &Instance, i: usize) -> NextStep<'_> {
    if i + 1 == inst.n() {
        NextStep::Terminal
    } else {
        NextStep::Network(&inst.u[i + 1])
    }
}

/// Relative disagreement of every loss kernel with its oracle at the
/// instance's step.
pub fn loss_oracle_errors(inst: &Instance) -> Vec<(&'static str, f64)> {
    let m = inst.model.as_ref();
    let i = inst.step;
    let p = &inst.paths;
    let (fu, fz) = frozen_steps(inst);
    let frozen = NetworkSteps { u: &fu, z: &fz };
    let mdbdp = loss_mdbdp(m, &inst.u_cand, &inst.z_cand, &frozen, p, i).unwrap();
    let dbdp1 = loss_dbdp1(m, &inst.u_cand, &inst.z_cand, next_step(inst, i), p, i).unwrap();
    let dbdp2 = loss_dbdp2(m, &inst.u_cand, next_step(inst, i), p, i).unwrap();
    let ds = loss_ds(m, &inst.u_cand, next_step(inst, i), p, i).unwrap();
    let dbsde = loss_dbsde(m, &inst.u_cand, &inst.z, p).unwrap();
    vec![
        ("mdbdp", rel_err(mdbdp, oracle_mdbdp(inst, i))),
        ("dbdp1", rel_err(dbdp1, oracle_dbdp1(inst, i))),
        ("dbdp2", rel_err(dbdp2, oracle_dbdp2(inst, i))),
        ("ds", rel_err(ds, oracle_ds(inst, i))),
        ("dbsde", rel_err(dbsde, oracle_dbsde(inst))),
    ]
}

/// Floor of the relative measure for network-level gradients.
pub const NET_FLOOR: f64 = 1e-4;
/// Floor of the relative measure for loss gradients.
pub const LOSS_FLOOR: f64 = 1e-5;

/// Worst finite-difference mismatch of the network gradients
/// (`grad_params`, `grad_input`) on the instance's networks and on a
/// GroupSort network.
pub fn network_gradient_errors(inst: &Instance, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = inst.model.d;
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let gs_arch = Architecture::new(d, vec![4], 2, Activation::GroupSort { group: 2 }).unwrap();
    let mut gs = random_params(&gs_arch, 0.8, &mut rng);
    gs.set_log_scale(rng.random_range(-0.5..0.5));
    let nets = [&inst.u_cand, &inst.z_cand, &gs];
    let mut params_err: f64 = 0.0;
    let mut input_err: f64 = 0.0;
    for net in nets {
        let out = net.arch().output_dim;
        let up: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = grad_params(net, &x, &up).unwrap();
        params_err = params_err.max(fd_mismatch(net, &analytic, NET_FLOOR, |p| {
            dot(&forward(p, &x).unwrap(), &up)
        }));
        let jac = grad_input(net, &x).unwrap();
        let h = 1e-5;
        for c in 0..d {
            let mut xp = x.clone();
            xp[c] += h;
            let fp = forward(net, &xp).unwrap();
            xp[c] -= 2.0 * h;
            let fm = forward(net, &xp).unwrap();
            for r in 0..out {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                let a = jac[[r, c]];
                input_err = input_err.max((a - fd).abs() / a.abs().max(fd.abs()).max(NET_FLOOR));
            }
        }
    }
    vec![("grad_params", params_err), ("grad_input", input_err)]
}

/// Worst finite-difference mismatch of each scheme's parameter gradients.
pub fn loss_gradient_errors(inst: &Instance) -> Vec<(&'static str, f64)> {
    let m = inst.model.as_ref();
    let i = inst.step;
    let p = &inst.paths;
    let (fu, fz) = frozen_steps(inst);
    let frozen = NetworkSteps { u: &fu, z: &fz };
    let (uc, zc) = (&inst.u_cand, &inst.z_cand);

    let target = mdbdp_target(m, &frozen, p, i).unwrap();
    let (_, du, dz) = local_loss_grad(m, uc, zc, target.view(), p, i).unwrap();
    let mdbdp = fd_mismatch(uc, &du, LOSS_FLOOR, |u| loss_mdbdp(m, u, zc, &frozen, p, i).unwrap()).max(
        fd_mismatch(zc, &dz, LOSS_FLOOR, |z| loss_mdbdp(m, uc, z, &frozen, p, i).unwrap()),
    );

    let next = next_step(inst, i);
    let (target, _) = next_values(m, next, p.states_at(i + 1), false).unwrap();
    let (_, du, dz) = local_loss_grad(m, uc, zc, target.view(), p, i).unwrap();
    let dbdp1 = fd_mismatch(uc, &du, LOSS_FLOOR, |u| loss_dbdp1(m, u, zc, next, p, i).unwrap())
        .max(fd_mismatch(zc, &dz, LOSS_FLOOR, |z| loss_dbdp1(m, uc, z, next, p, i).unwrap()));

    let (_, du) = dbdp2_loss_grad(m, uc, target.view(), p, i).unwrap();
    let dbdp2 = fd_mismatch(uc, &du, LOSS_FLOOR, |u| loss_dbdp2(m, u, next, p, i).unwrap());

    let target = ds_target(m, next, p, i).unwrap();
    let (_, du) = regression_loss_grad(uc, target.view(), p.states_at(i)).unwrap();
    let ds = fd_mismatch(uc, &du, LOSS_FLOOR, |u| loss_ds(m, u, next, p, i).unwrap());

    let (_, du, dzs) = dbsde_loss_grad(m, uc, &inst.z, p).unwrap();
    let mut dbsde = fd_mismatch(uc, &du, LOSS_FLOOR, |u| loss_dbsde(m, u, &inst.z, p).unwrap());
    for (j, dz) in dzs.iter().enumerate() {
        let err = fd_mismatch(&inst.z[j], dz, LOSS_FLOOR, |z| {
            let mut zs = inst.z.clone();
            zs[j] = z.clone();
            loss_dbsde(m, uc, &zs, p).unwrap()
        });
        dbsde = dbsde.max(err);
    }
    vec![
        ("mdbdp", mdbdp),
        ("dbdp1", dbdp1),
        ("dbdp2", dbdp2),
        ("ds", ds),
        ("dbsde", dbsde),
    ]
}
