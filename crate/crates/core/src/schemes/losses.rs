//! Mini-batch loss kernels and their parameter gradients.
//!
//! Every kernel takes the paths and the step index explicitly so it can be
//! checked against a straightforward per-path computation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::StepFunctions;
use crate::error::{Error, Result};
use crate::neuralnet::{forward_batch, value_and_input_grad, NetworkParams, Tape};
use crate::stochastics::{Model, PathBatch};

/// `f`, `∂f/∂y` and `∂f/∂z` evaluated row by row.
#[derive(Debug, Clone)]
pub struct GeneratorBatch {
    pub f: Array1<f64>,
    pub fy: Array1<f64>,
    pub fz: Array2<f64>,
}

pub fn generator_batch(
    model: &dyn Model,
    t: f64,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    z: ArrayView2<'_, f64>,
) -> GeneratorBatch {
    let (k, d) = x.dim();
    let mut f = Array1::zeros(k);
    let mut fy = Array1::zeros(k);
    let mut fz = Array2::zeros((k, d));
    let mut xb = vec![0.0; d];
    let mut zb = vec![0.0; d];
    for r in 0..k {
        xb.iter_mut().zip(x.row(r)).for_each(|(a, b)| *a = *b);
        zb.iter_mut().zip(z.row(r)).for_each(|(a, b)| *a = *b);
        let mut row = fz.row_mut(r);
        let (fv, fyv) = model.generator_with_grad(t, &xb, y[r], &zb, row.as_slice_mut().expect("contiguous"));
        f[r] = fv;
        fy[r] = fyv;
    }
    GeneratorBatch { f, fy, fz }
}

fn terminal_batch(model: &dyn Model, x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.rows().into_iter().map(|r| model.terminal(&r.to_vec())).collect()
}

fn sigma_t_batch(model: &dyn Model, t: f64, x: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(v.raw_dim());
    let d = x.ncols();
    let mut xb = vec![0.0; d];
    let mut vb = vec![0.0; d];
    for r in 0..x.nrows() {
        xb.iter_mut().zip(x.row(r)).for_each(|(a, b)| *a = *b);
        vb.iter_mut().zip(v.row(r)).for_each(|(a, b)| *a = *b);
        model.diffusion_tmul(t, &xb, &vb, out.row_mut(r).as_slice_mut().expect("contiguous"));
    }
    out
}

fn sigma_batch(model: &dyn Model, t: f64, x: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(v.raw_dim());
    let d = x.ncols();
    let mut xb = vec![0.0; d];
    let mut vb = vec![0.0; d];
    for r in 0..x.nrows() {
        xb.iter_mut().zip(x.row(r)).for_each(|(a, b)| *a = *b);
        vb.iter_mut().zip(v.row(r)).for_each(|(a, b)| *a = *b);
        model.diffusion_mul(t, &xb, &vb, out.row_mut(r).as_slice_mut().expect("contiguous"));
    }
    out
}

fn row_dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array1<f64> {
    (&a * &b).sum_axis(Axis(1))
}

fn check_reach(paths: &PathBatch, need: usize) -> Result<()> {
    if need > paths.last_step() {
        return Err(Error::InvalidArgument(format!(
            "need paths up to index {need}, batch stops at {}",
            paths.last_step()
        )));
    }
    Ok(())
}

fn check_target(target: ArrayView1<'_, f64>, batch: usize) -> Result<()> {
    if target.len() != batch {
        return Err(Error::DimensionMismatch {
            context: "regression target".into(),
            expected: batch,
            got: target.len(),
        });
    }
    Ok(())
}

/// Step `i` must be a time step (`i < N`) whose paths reach index `need`.
fn check_step(paths: &PathBatch, i: usize, need: usize) -> Result<()> {
    let n = paths.grid().n_steps();
    if i >= n {
        return Err(Error::InvalidArgument(format!("step {i} out of range 0..{}", n - 1)));
    }
    check_reach(paths, need)
}

/// `g(X_N) - Σ_{j>i} [f(t_j, X_j, Û_j, Ẑ_j) Δt_j + Ẑ_j·ΔW_j]`, with the
/// frozen functions queried at steps `i+1..N-1`.
pub fn mdbdp_target(model: &dyn Model, frozen: &dyn StepFunctions, paths: &PathBatch, i: usize) -> Result<Array1<f64>> {
    let n = paths.grid().n_steps();
    check_step(paths, i, n)?;
    let mut target = terminal_batch(model, paths.states_at(n));
    for j in i + 1..n {
        subtract_step_term(model, frozen, paths, j, &mut target)?;
    }
    Ok(target)
}

/// `acc -= f(t_j, X_j, Û_j, Ẑ_j) Δt_j + Ẑ_j·ΔW_j`, the contribution of step
/// `j` to the multistep target.
pub fn subtract_step_term(
    model: &dyn Model,
    frozen: &dyn StepFunctions,
    paths: &PathBatch,
    j: usize,
    acc: &mut Array1<f64>,
) -> Result<()> {
    check_step(paths, j, j + 1)?;
    let grid = paths.grid();
    let x = paths.states_at(j);
    let u = frozen.value(j, x)?;
    let z = frozen.z(j, x)?;
    let gen = generator_batch(model, grid.t(j), x, u.view(), z.view());
    let dt = grid.dt(j);
    let dw = paths.increments_at(j);
    for (k, a) in acc.iter_mut().enumerate() {
        let zdw: f64 = z.row(k).iter().zip(dw.row(k)).map(|(a, b)| a * b).sum();
        *a -= gen.f[k] * dt + zdw;
    }
    Ok(())
}

/// `g(X_N)` on a batch of paths that reach the horizon.
pub fn terminal_values(model: &dyn Model, paths: &PathBatch) -> Result<Array1<f64>> {
    let n = paths.grid().n_steps();
    check_reach(paths, n)?;
    Ok(terminal_batch(model, paths.states_at(n)))
}

fn local_residuals(
    model: &dyn Model,
    u: ArrayView1<'_, f64>,
    z: ArrayView2<'_, f64>,
    target: ArrayView1<'_, f64>,
    paths: &PathBatch,
    i: usize,
) -> (Array1<f64>, GeneratorBatch) {
    let grid = paths.grid();
    let x = paths.states_at(i);
    let dw = paths.increments_at(i);
    let gen = generator_batch(model, grid.t(i), x, u, z);
    let r = &target - &u - &gen.f * grid.dt(i) - row_dot(z, dw);
    (r, gen)
}

fn mean_square(r: &Array1<f64>) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
}

/// Mean squared one-step residual `target - U_i - f Δt_i - Z_i·ΔW_i` for
/// arbitrary current functions.
pub fn loss_mdbdp_with(
    model: &dyn Model,
    current: &dyn StepFunctions,
    frozen: &dyn StepFunctions,
    paths: &PathBatch,
    i: usize,
) -> Result<f64> {
    let target = mdbdp_target(model, frozen, paths, i)?;
    let x = paths.states_at(i);
    let u = current.value(i, x)?;
    let z = current.z(i, x)?;
    let (r, _) = local_residuals(model, u.view(), z.view(), target.view(), paths, i);
    Ok(mean_square(&r))
}

/// Multistep loss of the candidate pair `(u_i, z_i)` at step `i`.
pub fn loss_mdbdp(
    model: &dyn Model,
    u_i: &NetworkParams,
    z_i: &NetworkParams,
    frozen: &dyn StepFunctions,
    paths: &PathBatch,
    i: usize,
) -> Result<f64> {
    let target = mdbdp_target(model, frozen, paths, i)?;
    let x = paths.states_at(i);
    let u = forward_batch(u_i, x)?.column(0).to_owned();
    let z = forward_batch(z_i, x)?;
    let (r, _) = local_residuals(model, u.view(), z.view(), target.view(), paths, i);
    Ok(mean_square(&r))
}

/// The function taking the place of `Û_{i+1}`.
#[derive(Debug, Clone, Copy)]
pub enum NextStep<'a> {
    /// The terminal function `g` (step `N`).
    Terminal,
    Network(&'a NetworkParams),
}

/// `Û_{i+1}(X_{i+1})` and, when asked, its spatial gradient.
pub fn next_values(
    model: &dyn Model,
    next: NextStep<'_>,
    x: ArrayView2<'_, f64>,
    with_grad: bool,
) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
    match next {
        NextStep::Network(net) if with_grad => {
            let (v, g) = value_and_input_grad(net, x)?;
            Ok((v, Some(g)))
        }
        NextStep::Network(net) => Ok((forward_batch(net, x)?.column(0).to_owned(), None)),
        NextStep::Terminal => {
            let v = terminal_batch(model, x);
            if !with_grad {
                return Ok((v, None));
            }
            let mut g = Array2::zeros(x.raw_dim());
            for (row, mut out) in x.rows().into_iter().zip(g.rows_mut()) {
                let grad = model.terminal_grad(&row.to_vec()).ok_or_else(|| {
                    Error::InvalidArgument("the model provides no closed-form terminal gradient".into())
                })?;
                out.assign(&ArrayView1::from(&grad[..]));
            }
            Ok((v, Some(g)))
        }
    }
}

/// DBDP1 loss: the one-step residual against `Û_{i+1}(X_{i+1})`.
pub fn loss_dbdp1(
    model: &dyn Model,
    u_i: &NetworkParams,
    z_i: &NetworkParams,
    next: NextStep<'_>,
    paths: &PathBatch,
    i: usize,
) -> Result<f64> {
    check_step(paths, i, i + 1)?;
    let (target, _) = next_values(model, next, paths.states_at(i + 1), false)?;
    let x = paths.states_at(i);
    let u = forward_batch(u_i, x)?.column(0).to_owned();
    let z = forward_batch(z_i, x)?;
    let (r, _) = local_residuals(model, u.view(), z.view(), target.view(), paths, i);
    Ok(mean_square(&r))
}

/// DBDP2 loss: as DBDP1 with `Z_i = σᵀ D_x U_i`.
pub fn loss_dbdp2(
    model: &dyn Model,
    u_i: &NetworkParams,
    next: NextStep<'_>,
    paths: &PathBatch,
    i: usize,
) -> Result<f64> {
    check_step(paths, i, i + 1)?;
    let (target, _) = next_values(model, next, paths.states_at(i + 1), false)?;
    let x = paths.states_at(i);
    let (u, grad) = value_and_input_grad(u_i, x)?;
    let z = sigma_t_batch(model, paths.grid().t(i), x, grad.view());
    let (r, _) = local_residuals(model, u.view(), z.view(), target.view(), paths, i);
    Ok(mean_square(&r))
}

/// Regression target of Deep Splitting at step `i`:
/// `Û_{i+1}(X_{i+1}) - f(t_i, X_{i+1}, Û_{i+1}, σ(t_i, X_i)ᵀ D_x Û_{i+1}(X_{i+1})) Δt_i`.
pub fn ds_target(model: &dyn Model, next: NextStep<'_>, paths: &PathBatch, i: usize) -> Result<Array1<f64>> {
    check_step(paths, i, i + 1)?;
    let grid = paths.grid();
    let x0 = paths.states_at(i);
    let x1 = paths.states_at(i + 1);
    let (v, g) = next_values(model, next, x1, true)?;
    let z = sigma_t_batch(model, grid.t(i), x0, g.expect("gradient requested").view());
    let gen = generator_batch(model, grid.t(i), x1, v.view(), z.view());
    Ok(v - gen.f * grid.dt(i))
}

pub fn loss_ds(model: &dyn Model, u_i: &NetworkParams, next: NextStep<'_>, paths: &PathBatch, i: usize) -> Result<f64> {
    let target = ds_target(model, next, paths, i)?;
    let u = forward_batch(u_i, paths.states_at(i))?.column(0).to_owned();
    Ok(mean_square(&(target - u)))
}

/// Terminal mismatch `|Y_N - g(X_N)|²` of the forward shooting recursion
/// `Y_{i+1} = Y_i + f(t_i, X_i, Y_i, Z_i) Δt_i + Z_i·ΔW_i`, `Y_0 = U_0(X_0)`.
pub fn loss_dbsde(model: &dyn Model, u0: &NetworkParams, z_nets: &[NetworkParams], paths: &PathBatch) -> Result<f64> {
    let grid = paths.grid();
    let n = grid.n_steps();
    check_step(paths, 0, n)?;
    check_z_count(z_nets, n)?;
    let mut y = forward_batch(u0, paths.states_at(0))?.column(0).to_owned();
    for (i, net) in z_nets.iter().enumerate() {
        let x = paths.states_at(i);
        let z = forward_batch(net, x)?;
        let gen = generator_batch(model, grid.t(i), x, y.view(), z.view());
        y = y + gen.f * grid.dt(i) + row_dot(z.view(), paths.increments_at(i));
    }
    let r = y - terminal_batch(model, paths.states_at(n));
    Ok(mean_square(&r))
}

fn check_z_count(z_nets: &[NetworkParams], n: usize) -> Result<()> {
    if z_nets.len() != n {
        return Err(Error::DimensionMismatch {
            context: "gradient networks".into(),
            expected: n,
            got: z_nets.len(),
        });
    }
    Ok(())
}

/// Loss and parameter gradients for the one-step residual shared by MDBDP
/// and DBDP1.
pub fn local_loss_grad(
    model: &dyn Model,
    u_i: &NetworkParams,
    z_i: &NetworkParams,
    target: ArrayView1<'_, f64>,
    paths: &PathBatch,
    i: usize,
) -> Result<(f64, NetworkParams, NetworkParams)> {
    check_step(paths, i, i + 1)?;
    check_target(target, paths.batch_size())?;
    let x = paths.states_at(i);
    let tu = Tape::record(u_i, x)?;
    let tz = Tape::record(z_i, x)?;
    let u = tu.output().column(0);
    let z = tz.output().view();
    let (r, gen) = local_residuals(model, u, z, target, paths, i);
    let loss = mean_square(&r);
    let dt = paths.grid().dt(i);
    let c = r * (2.0 / x.nrows() as f64);
    let gu = (&c * &(gen.fy * (-dt) - 1.0)).insert_axis(Axis(1));
    let gz = (gen.fz * (-dt) - &paths.increments_at(i)) * &c.view().insert_axis(Axis(1));
    let (du, _) = tu.backward(gu.view(), false);
    let (dz, _) = tz.backward(gz.view(), false);
    Ok((loss, du, dz))
}

/// Loss and parameter gradient for DBDP2, differentiating through
/// `Z_i = σᵀ D_x U_i`.
pub fn dbdp2_loss_grad(
    model: &dyn Model,
    u_i: &NetworkParams,
    target: ArrayView1<'_, f64>,
    paths: &PathBatch,
    i: usize,
) -> Result<(f64, NetworkParams)> {
    check_step(paths, i, i + 1)?;
    check_target(target, paths.batch_size())?;
    let x = paths.states_at(i);
    let k = x.nrows();
    let t = paths.grid().t(i);
    let dt = paths.grid().dt(i);
    let tape = Tape::record(u_i, x)?;
    let ones = Array2::<f64>::ones((k, 1));
    let grad = tape.input_vjp(ones.view());
    let z = sigma_t_batch(model, t, x, grad.view());
    let u = tape.output().column(0);
    let (r, gen) = local_residuals(model, u, z.view(), target, paths, i);
    let loss = mean_square(&r);
    let c = r * (2.0 / k as f64);
    let gu = (&c * &(gen.fy * (-dt) - 1.0)).insert_axis(Axis(1));
    let gz = (gen.fz * (-dt) - &paths.increments_at(i)) * &c.view().insert_axis(Axis(1));
    // gz·(σᵀ∇U) = (σ gz)·∇U
    let v = sigma_batch(model, t, x, gz.view());
    let tangent = tape.tangent(v.view());
    let du = tape.backward_dual(&tangent, gu.view(), ones.view());
    Ok((loss, du))
}

/// `mean (target - U(x))²` and its gradient.
pub fn regression_loss_grad(
    u: &NetworkParams,
    target: ArrayView1<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> Result<(f64, NetworkParams)> {
    check_target(target, x.nrows())?;
    let tape = Tape::record(u, x)?;
    let r = &target - &tape.output().column(0);
    let loss = mean_square(&r);
    let g = (r * (-2.0 / x.nrows() as f64)).insert_axis(Axis(1));
    let (du, _) = tape.backward(g.view(), false);
    Ok((loss, du))
}

/// Loss and gradients of the forward shooting objective, by reverse sweep
/// through the recursion.
pub fn dbsde_loss_grad(
    model: &dyn Model,
    u0: &NetworkParams,
    z_nets: &[NetworkParams],
    paths: &PathBatch,
) -> Result<(f64, NetworkParams, Vec<NetworkParams>)> {
    let grid = paths.grid();
    let n = grid.n_steps();
    check_step(paths, 0, n)?;
    check_z_count(z_nets, n)?;
    let k = paths.batch_size();
    let tu = Tape::record(u0, paths.states_at(0))?;
    let mut y = tu.output().column(0).to_owned();
    let mut tapes = Vec::with_capacity(n);
    let mut partials = Vec::with_capacity(n);
    for (i, net) in z_nets.iter().enumerate() {
        let x = paths.states_at(i);
        let tz = Tape::record(net, x)?;
        let gen = generator_batch(model, grid.t(i), x, y.view(), tz.output().view());
        y = y + &gen.f * grid.dt(i) + row_dot(tz.output().view(), paths.increments_at(i));
        tapes.push(tz);
        partials.push((gen.fy, gen.fz));
    }
    let r = y - terminal_batch(model, paths.states_at(n));
    let loss = mean_square(&r);
    let mut lambda = r * (2.0 / k as f64);
    let mut grads = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let dt = grid.dt(i);
        let (fy, fz) = &partials[i];
        let gz = (fz * dt + &paths.increments_at(i)) * &lambda.view().insert_axis(Axis(1));
        grads.push(tapes[i].backward(gz.view(), false).0);
        lambda = lambda * &(fy * dt + 1.0);
    }
    grads.reverse();
    let (du, _) = tu.backward(lambda.insert_axis(Axis(1)).view(), false);
    Ok((loss, du, grads))
}
