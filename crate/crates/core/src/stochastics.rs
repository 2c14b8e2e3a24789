//! Time grids, diffusion models and Euler–Maruyama path simulation.
//!
//! Every random draw is tied to a `(seed, path index)` stream: path `k` of a
//! batch is generated from its own ChaCha stream, so a batch of size `K` is
//! always a prefix of a larger batch with the same seed and the result does
//! not depend on how the batch is filled.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Subdivision `0 = t_0 < t_1 < ... < t_N = T` of the time horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("at least one time step is required".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive and finite, got {horizon}")));
        }
        let dt = horizon / n_steps as f64;
        let mut times: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
        times[n_steps] = horizon;
        Ok(Self { times })
    }

    /// Builds a grid from explicit times; the first must be 0.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least two time points".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time point".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("grid must start at 0, got {}", times[0])));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "times must be strictly increasing (t[{}] = {} >= t[{}] = {})",
                w,
                times[w],
                w + 1,
                times[w + 1]
            )));
        }
        Ok(Self { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// `Δt_i = t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.n_steps()]
    }

    /// The modulus `|π| = max_i Δt_i`.
    pub fn modulus(&self) -> f64 {
        (0..self.n_steps()).map(|i| self.dt(i)).fold(0.0, f64::max)
    }
}

/// A forward diffusion `dX = μ dt + σ dW` paired with the generator `f` and
/// terminal data `g` of the associated semilinear PDE
/// `∂_t u + μ·D_x u + ½ Tr(σσᵀ D²_x u) = f(t, x, u, σᵀ D_x u)`, `u(T, ·) = g`.
///
/// The diffusion matrix is row-major `d × d`.
pub trait Model: Send + Sync {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `out = σ(t, x) v`.
    fn diffusion_mul(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        self.diffusion(t, x, &mut sigma);
        for (r, o) in out.iter_mut().enumerate() {
            *o = sigma[r * d..(r + 1) * d].iter().zip(v).map(|(s, v)| s * v).sum();
        }
    }

    /// `out = σ(t, x)ᵀ v`.
    fn diffusion_tmul(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        self.diffusion(t, x, &mut sigma);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, vr) in v.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += sigma[r * d + c] * vr;
            }
        }
    }

    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;

    /// Returns `(f, ∂f/∂y)` and writes `∂f/∂z` into `dz`.
    fn generator_with_grad(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64);

    fn terminal(&self, x: &[f64]) -> f64;

    /// Gradient of the terminal function, when available in closed form.
    fn terminal_grad(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Closed-form PDE solution `u(t, x)`, if known.
    fn solution(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Closed-form `σᵀ D_x u(t, x)`, if known.
    fn solution_z(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// `(μ, σ)` (σ row-major) when neither depends on `(t, x)`. Paths of
    /// such models are simulated without per-step coefficient calls.
    fn constant_coefficients(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Identifier used in checkpoint manifests to rebuild the model.
    fn id(&self) -> String {
        "custom".to_string()
    }
}

type VecFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
type GenFn = dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync;
type GenGradFn = dyn Fn(f64, &[f64], f64, &[f64]) -> (f64, Vec<f64>) + Send + Sync;
type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type SolutionFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Closure-backed [`Model`], handy for ad-hoc instances.
///
/// Defaults: zero drift, identity diffusion, zero generator, zero terminal.
#[derive(Clone)]
pub struct ModelSpec {
    dim: usize,
    horizon: f64,
    drift: Arc<VecFn>,
    diffusion: Arc<VecFn>,
    generator: Arc<GenFn>,
    generator_grad: Arc<GenGradFn>,
    terminal: Arc<ScalarFn>,
    solution: Option<Arc<SolutionFn>>,
    solution_z: Option<Arc<VecFn>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("has_solution", &self.solution.is_some())
            .finish()
    }
}

impl ModelSpec {
    pub fn new(dim: usize, horizon: f64) -> Self {
        Self {
            dim,
            horizon,
            drift: Arc::new(move |_, _| vec![0.0; dim]),
            diffusion: Arc::new(move |_, _| {
                let mut m = vec![0.0; dim * dim];
                (0..dim).for_each(|i| m[i * dim + i] = 1.0);
                m
            }),
            generator: Arc::new(|_, _, _, _| 0.0),
            generator_grad: Arc::new(move |_, _, _, _| (0.0, vec![0.0; dim])),
            terminal: Arc::new(|_| 0.0),
            solution: None,
            solution_z: None,
        }
    }

    pub fn with_drift(mut self, f: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    /// Diffusion as a row-major `d × d` matrix.
    pub fn with_diffusion(mut self, f: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    /// Generator and its partial derivatives `(∂f/∂y, ∂f/∂z)`.
    pub fn with_generator(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64], f64, &[f64]) -> (f64, Vec<f64>) + Send + Sync + 'static,
    ) -> Self {
        self.generator = Arc::new(f);
        self.generator_grad = Arc::new(grad);
        self
    }

    pub fn with_terminal(mut self, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(g);
        self
    }

    pub fn with_solution(
        mut self,
        u: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        z: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.solution = Some(Arc::new(u));
        self.solution_z = Some(Arc::new(z));
        self
    }
}

impl Model for ModelSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&(self.drift)(t, x));
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&(self.diffusion)(t, x));
    }

    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.generator)(t, x, y, z)
    }

    fn generator_with_grad(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        let (fy, fz) = (self.generator_grad)(t, x, y, z);
        dz.copy_from_slice(&fz);
        ((self.generator)(t, x, y, z), fy)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    fn solution(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.solution.as_ref().map(|u| u(t, x))
    }

    fn solution_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        self.solution_z.as_ref().map(|z| z(t, x))
    }
}

/// Simulated Euler states and Brownian increments for a mini-batch.
///
/// Storage is step-major: `states[[i, k, ..]]` is `X_i` on path `k`, so the
/// batch at one time step is a contiguous `K × d` matrix.
#[derive(Debug, Clone)]
pub struct PathBatch {
    states: Array3<f64>,
    increments: Array3<f64>,
    grid: TimeGrid,
}

impl PathBatch {
    pub fn new(states: Array3<f64>, increments: Array3<f64>, grid: TimeGrid) -> Result<Self> {
        let (ns, ks, ds) = states.dim();
        let (ni, ki, di) = increments.dim();
        if ks != ki || ds != di || ns != ni + 1 || ni > grid.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "inconsistent path batch shapes: states {:?}, increments {:?}, grid steps {}",
                states.dim(),
                increments.dim(),
                grid.n_steps()
            )));
        }
        Ok(Self {
            states,
            increments,
            grid,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.states.dim().1
    }

    pub fn dim(&self) -> usize {
        self.states.dim().2
    }

    /// Last simulated time index (N for a full path).
    pub fn last_step(&self) -> usize {
        self.states.dim().0 - 1
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `X_i` for the whole batch, `K × d`.
    pub fn states_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(0), i)
    }

    /// `ΔW_i` for the whole batch, `K × d`.
    pub fn increments_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.increments.index_axis(Axis(0), i)
    }

    /// `X_i` on path `k`.
    pub fn state(&self, k: usize, i: usize) -> ArrayView1<'_, f64> {
        self.states.slice(ndarray::s![i, k, ..])
    }

    /// `ΔW_i` on path `k`.
    pub fn increment(&self, k: usize, i: usize) -> ArrayView1<'_, f64> {
        self.increments.slice(ndarray::s![i, k, ..])
    }

    pub fn states(&self) -> &Array3<f64> {
        &self.states
    }

    pub fn increments(&self) -> &Array3<f64> {
        &self.increments
    }
}

/// Mixes a base seed with a sequence of tags into a new 64-bit seed
/// (splitmix64 finalizer applied after each tag).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Random stream for path `k` of the batch generated from `seed`. It depends
/// on `(seed, k)` only, so a path's draws do not change with the batch size.
pub fn path_rng(seed: u64, k: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, &[k as u64]))
}

fn check_grid(grid: &TimeGrid) -> Result<()> {
    if grid.times().iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidGrid("non-finite time point".into()));
    }
    Ok(())
}

/// Gaussian increments `ΔW_i ~ N(0, Δt_i I_d)`, shape `N × batch × dim`.
pub fn sample_increments(grid: &TimeGrid, dim: usize, batch: usize, seed: u64) -> Result<Array3<f64>> {
    sample_increments_until(grid, dim, batch, seed, grid.n_steps())
}

/// Like [`sample_increments`] but only for steps `0..steps`. Each path's
/// draws are a prefix of the full-grid draws for the same seed.
pub fn sample_increments_until(
    grid: &TimeGrid,
    dim: usize,
    batch: usize,
    seed: u64,
    steps: usize,
) -> Result<Array3<f64>> {
    check_grid(grid)?;
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    if steps > grid.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "requested {steps} steps on a grid with {}",
            grid.n_steps()
        )));
    }
    let scales: Vec<f64> = (0..steps).map(|i| grid.dt(i).sqrt()).collect();
    let mut out = Array3::<f64>::zeros((steps, batch, dim));
    for k in 0..batch {
        let mut rng = path_rng(seed, k);
        for (i, s) in scales.iter().enumerate() {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                out[[i, k, j]] = s * z;
            }
        }
    }
    Ok(out)
}

/// One Euler–Maruyama step `x + μ(t, x) dt + σ(t, x) dw`.
pub fn euler_step(x: &[f64], t: f64, dt: f64, dw: &[f64], model: &dyn Model) -> Result<Vec<f64>> {
    let d = model.dim();
    if x.len() != d || dw.len() != d {
        return Err(Error::DimensionMismatch {
            context: "euler_step state/increment".into(),
            expected: d,
            got: if x.len() != d { x.len() } else { dw.len() },
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let mut out = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    euler_step_into(x, t, dt, dw, model, &mut scratch, &mut out)?;
    Ok(out)
}

fn euler_step_into(
    x: &[f64],
    t: f64,
    dt: f64,
    dw: &[f64],
    model: &dyn Model,
    scratch: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    model.drift(t, x, scratch);
    if scratch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            coefficient: "drift",
            step: None,
        });
    }
    for ((o, xi), mu) in out.iter_mut().zip(x).zip(scratch.iter()) {
        *o = xi + mu * dt;
    }
    model.diffusion_mul(t, x, dw, scratch);
    if scratch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            coefficient: "diffusion",
            step: None,
        });
    }
    for (o, s) in out.iter_mut().zip(scratch.iter()) {
        *o += s;
    }
    Ok(())
}

/// Runs the Euler scheme from `x0` through the given increments
/// (`steps × batch × d`), returning states of shape `(steps + 1) × batch × d`.
pub fn euler_states(model: &dyn Model, grid: &TimeGrid, x0: &[f64], increments: &Array3<f64>) -> Result<Array3<f64>> {
    let d = model.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            context: "initial condition".into(),
            expected: d,
            got: x0.len(),
        });
    }
    let (steps, batch, di) = increments.dim();
    if di != d {
        return Err(Error::DimensionMismatch {
            context: "increments".into(),
            expected: d,
            got: di,
        });
    }
    let mut states = Array3::<f64>::zeros((steps + 1, batch, d));
    let layer = batch * d;
    let buf = states.as_slice_mut().expect("standard layout");
    let inc = increments.as_standard_layout();
    let inc = inc.as_slice().expect("standard layout");
    for row in buf[..layer].chunks_exact_mut(d) {
        row.copy_from_slice(x0);
    }
    if let Some((mu, sigma)) = model.constant_coefficients() {
        euler_constant(grid, &mu, &sigma, buf, inc, layer, d)?;
        return Ok(states);
    }
    let mut scratch = vec![0.0; d];
    for i in 0..steps {
        let (t, dt) = (grid.t(i), grid.dt(i));
        let (done, rest) = buf.split_at_mut((i + 1) * layer);
        let cur = &done[i * layer..];
        let next = &mut rest[..layer];
        let dws = &inc[i * layer..(i + 1) * layer];
        for ((x, dw), out) in cur.chunks_exact(d).zip(dws.chunks_exact(d)).zip(next.chunks_exact_mut(d)) {
            euler_step_into(x, t, dt, dw, model, &mut scratch, out).map_err(|e| e.at_step(i))?;
        }
    }
    Ok(states)
}

fn euler_constant(
    grid: &TimeGrid,
    mu: &[f64],
    sigma: &[f64],
    buf: &mut [f64],
    inc: &[f64],
    layer: usize,
    d: usize,
) -> Result<()> {
    if mu.len() != d || sigma.len() != d * d {
        return Err(Error::DimensionMismatch {
            context: "constant coefficients".into(),
            expected: d,
            got: mu.len(),
        });
    }
    for (coefficient, values) in [("drift", mu), ("diffusion", sigma)] {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                coefficient,
                step: Some(0),
            });
        }
    }
    let diagonal = (0..d).all(|r| (0..d).all(|c| r == c || sigma[r * d + c] == 0.0));
    let diag: Vec<f64> = (0..d).map(|r| sigma[r * d + r]).collect();
    let steps = inc.len() / layer.max(1);
    let mut shift = vec![0.0; d];
    for i in 0..steps {
        let dt = grid.dt(i);
        shift.iter_mut().zip(mu).for_each(|(s, m)| *s = m * dt);
        let (done, rest) = buf.split_at_mut((i + 1) * layer);
        let cur = &done[i * layer..];
        let next = &mut rest[..layer];
        let dws = &inc[i * layer..(i + 1) * layer];
        for ((x, dw), out) in cur.chunks_exact(d).zip(dws.chunks_exact(d)).zip(next.chunks_exact_mut(d)) {
            if diagonal {
                for j in 0..d {
                    out[j] = x[j] + shift[j] + diag[j] * dw[j];
                }
            } else {
                for j in 0..d {
                    let noise: f64 = sigma[j * d..(j + 1) * d].iter().zip(dw).map(|(s, w)| s * w).sum();
                    out[j] = x[j] + shift[j] + noise;
                }
            }
        }
    }
    Ok(())
}

/// Simulates `batch` Euler paths over the whole grid from the deterministic
/// initial condition `x0`.
pub fn simulate_paths(model: &dyn Model, grid: &TimeGrid, x0: &[f64], batch: usize, seed: u64) -> Result<PathBatch> {
    simulate_paths_until(model, grid, x0, batch, seed, grid.n_steps())
}

/// Simulates paths only up to time index `last` (inclusive).
pub fn simulate_paths_until(
    model: &dyn Model,
    grid: &TimeGrid,
    x0: &[f64],
    batch: usize,
    seed: u64,
    last: usize,
) -> Result<PathBatch> {
    let increments = sample_increments_until(grid, model.dim(), batch, seed, last)?;
    let states = euler_states(model, grid, x0, &increments)?;
    PathBatch::new(states, increments, grid.clone())
}
