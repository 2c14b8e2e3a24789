//! Benchmark PDE instances with closed-form solutions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::stochastics::Model;

/// A model together with its initial point and known value `u(0, x0)`.
#[derive(Clone)]
pub struct ProblemInstance {
    pub model: Arc<dyn Model>,
    pub x0: Vec<f64>,
    pub reference_y0: Option<f64>,
    pub label: String,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("label", &self.label)
            .field("dim", &self.model.dim())
            .field("x0", &self.x0)
            .field("reference_y0", &self.reference_y0)
            .finish()
    }
}

impl ProblemInstance {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArgument("problem dimension must be at least 1".into()));
    }
    Ok(())
}

fn instance(model: Arc<dyn Model>, x0: Vec<f64>, label: &str) -> ProblemInstance {
    let reference_y0 = model.solution(0.0, &x0);
    ProblemInstance {
        model,
        x0,
        reference_y0,
        label: label.to_string(),
    }
}

/// `μ = 0.2/d · 1_d`, `σ = I_d / √d`, `g(x) = cos(x̄)` with `x̄ = Σ x_i`, and
/// a generator chosen so that `u(t, x) = cos(x̄) e^{(T-t)/2}`.
#[derive(Debug, Clone)]
pub struct BoundedProblem {
    dim: usize,
    horizon: f64,
}

impl BoundedProblem {
    pub fn new(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { dim, horizon: 1.0 })
    }

    fn inv_sqrt_d(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}

impl Model for BoundedProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.2 / self.dim as f64);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let s = self.inv_sqrt_d();
        (0..self.dim).for_each(|i| out[i * self.dim + i] = s);
    }

    fn diffusion_mul(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        let s = self.inv_sqrt_d();
        out.iter_mut().zip(v).for_each(|(o, v)| *o = s * v);
    }

    fn diffusion_tmul(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.diffusion_mul(t, x, v, out)
    }

    fn constant_coefficients(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let x = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        self.drift(0.0, &x, &mut mu);
        self.diffusion(0.0, &x, &mut sigma);
        Some((mu, sigma))
    }

    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let xbar: f64 = x.iter().sum();
        let zsum: f64 = z.iter().sum();
        let e = ((self.horizon - t) / 2.0).exp();
        let (s, c) = xbar.sin_cos();
        let yz = y * zsum;
        -(c + 0.2 * s) * e + 0.5 * (s * c * e * e).powi(2) - yz * yz / (2.0 * self.dim as f64)
    }

    fn generator_with_grad(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        let zsum: f64 = z.iter().sum();
        let inv_d = 1.0 / self.dim as f64;
        dz.fill(-inv_d * y * y * zsum);
        (self.generator(t, x, y, z), -inv_d * y * zsum * zsum)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>().cos()
    }

    fn terminal_grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        let s = x.iter().sum::<f64>().sin();
        Some(vec![-s; self.dim])
    }

    fn solution(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(x.iter().sum::<f64>().cos() * ((self.horizon - t) / 2.0).exp())
    }

    fn solution_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let v = -x.iter().sum::<f64>().sin() * ((self.horizon - t) / 2.0).exp() * self.inv_sqrt_d();
        Some(vec![v; self.dim])
    }

    fn id(&self) -> String {
        format!("bounded:{}", self.dim)
    }
}

/// `μ = 0`, `σ = I_d / √d`, with solution
/// `u(t, x) = (T - t)/d Σ_i h(x_i) + cos(Σ_i i x_i)`,
/// `h(x) = sin(x) 1_{x<0} + x 1_{x≥0}`, and generator
/// `f(t, x, y, z) = k(t, x) - y/√d (1_d · z) - y²/2`.
#[derive(Debug, Clone)]
pub struct UnboundedProblem {
    dim: usize,
    horizon: f64,
}

fn h(x: f64) -> f64 {
    if x < 0.0 {
        x.sin()
    } else {
        x
    }
}

fn h_prime(x: f64) -> f64 {
    if x < 0.0 {
        x.cos()
    } else {
        1.0
    }
}

fn h_second(x: f64) -> f64 {
    if x < 0.0 {
        -x.sin()
    } else {
        0.0
    }
}

impl UnboundedProblem {
    pub fn new(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { dim, horizon: 1.0 })
    }

    fn inv_sqrt_d(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    /// `Σ_i i x_i` with 1-based weights.
    fn weighted_sum(x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum()
    }

    fn u(&self, t: f64, x: &[f64]) -> f64 {
        let tau = (self.horizon - t) / self.dim as f64;
        tau * x.iter().map(|&v| h(v)).sum::<f64>() + Self::weighted_sum(x).cos()
    }

    /// `∂_t u`.
    pub fn time_derivative(&self, x: &[f64]) -> f64 {
        -x.iter().map(|&v| h(v)).sum::<f64>() / self.dim as f64
    }

    /// `D_x u`.
    pub fn space_gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let tau = (self.horizon - t) / self.dim as f64;
        let s = Self::weighted_sum(x).sin();
        x.iter()
            .enumerate()
            .map(|(i, &v)| tau * h_prime(v) - (i + 1) as f64 * s)
            .collect()
    }

    /// Diagonal of `D²_x u`.
    pub fn hessian_diagonal(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let tau = (self.horizon - t) / self.dim as f64;
        let c = Self::weighted_sum(x).cos();
        x.iter()
            .enumerate()
            .map(|(i, &v)| tau * h_second(v) - ((i + 1) as f64).powi(2) * c)
            .collect()
    }

    /// Source term `k(t, x)`, assembled from the closed-form derivatives of
    /// `u` so that `u` solves the PDE:
    /// `k = ∂_t u + ½ Tr(σσᵀ D²u) + u/√d (1_d · σᵀ D_x u) + u²/2`.
    pub fn source(&self, t: f64, x: &[f64]) -> f64 {
        let d = self.dim as f64;
        let u = self.u(t, x);
        let trace: f64 = self.hessian_diagonal(t, x).iter().sum::<f64>() / d;
        let grad_sum: f64 = self.space_gradient(t, x).iter().sum();
        self.time_derivative(x) + 0.5 * trace + u * grad_sum / d + 0.5 * u * u
    }
}

impl Model for UnboundedProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let s = self.inv_sqrt_d();
        (0..self.dim).for_each(|i| out[i * self.dim + i] = s);
    }

    fn diffusion_mul(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        let s = self.inv_sqrt_d();
        out.iter_mut().zip(v).for_each(|(o, v)| *o = s * v);
    }

    fn diffusion_tmul(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.diffusion_mul(t, x, v, out)
    }

    fn constant_coefficients(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let x = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        self.drift(0.0, &x, &mut mu);
        self.diffusion(0.0, &x, &mut sigma);
        Some((mu, sigma))
    }

    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        let zsum: f64 = z.iter().sum();
        self.source(t, x) - y * self.inv_sqrt_d() * zsum - 0.5 * y * y
    }

    fn generator_with_grad(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        let zsum: f64 = z.iter().sum();
        let s = self.inv_sqrt_d();
        dz.fill(-y * s);
        (self.generator(t, x, y, z), -s * zsum - y)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        Self::weighted_sum(x).cos()
    }

    fn terminal_grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        let s = Self::weighted_sum(x).sin();
        Some((0..self.dim).map(|i| -((i + 1) as f64) * s).collect())
    }

    fn solution(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(self.u(t, x))
    }

    fn solution_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let s = self.inv_sqrt_d();
        Some(self.space_gradient(t, x).into_iter().map(|g| g * s).collect())
    }

    fn id(&self) -> String {
        format!("unbounded:{}", self.dim)
    }
}

/// Heat equation with `μ = 0`, `σ = I_d`, `f ≡ 0`, `g(x) = |x|²`, so that
/// `u(t, x) = |x|² + d (T - t)`.
#[derive(Debug, Clone)]
pub struct HeatProblem {
    dim: usize,
    horizon: f64,
}

impl HeatProblem {
    pub fn new(dim: usize, horizon: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { dim, horizon })
    }
}

impl Model for HeatProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        (0..self.dim).for_each(|i| out[i * self.dim + i] = 1.0);
    }

    fn diffusion_mul(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
    }

    fn diffusion_tmul(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
    }

    fn constant_coefficients(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let x = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        self.drift(0.0, &x, &mut mu);
        self.diffusion(0.0, &x, &mut sigma);
        Some((mu, sigma))
    }

    fn generator(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64]) -> f64 {
        0.0
    }

    fn generator_with_grad(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.fill(0.0);
        (0.0, 0.0)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn terminal_grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().map(|v| 2.0 * v).collect())
    }

    fn solution(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(self.terminal(x) + self.dim as f64 * (self.horizon - t))
    }

    fn solution_z(&self, _t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(x.iter().map(|v| 2.0 * v).collect())
    }

    fn id(&self) -> String {
        format!("heat:{}", self.dim)
    }
}

/// Bounded-solution benchmark at `x0 = 1_d`, `T = 1`.
pub fn bounded_problem(d: usize) -> Result<ProblemInstance> {
    let model = Arc::new(BoundedProblem::new(d)?);
    Ok(instance(model, vec![1.0; d], "bounded"))
}

/// Unbounded-solution benchmark at `x0 = 0.5 · 1_d`, `T = 1`.
pub fn unbounded_problem(d: usize) -> Result<ProblemInstance> {
    let model = Arc::new(UnboundedProblem::new(d)?);
    Ok(instance(model, vec![0.5; d], "unbounded"))
}

/// Zero-generator validation instance at `x0 = 0`, `T = 1`.
pub fn heat_oracle_problem(d: usize) -> Result<ProblemInstance> {
    let model = Arc::new(HeatProblem::new(d, 1.0)?);
    Ok(instance(model, vec![0.0; d], "heat"))
}

pub const PROBLEM_LABELS: [&str; 3] = ["bounded", "unbounded", "heat"];

/// Resolves `bounded`, `unbounded` or `heat`.
pub fn problem_by_label(label: &str, d: usize) -> Result<ProblemInstance> {
    match label {
        "bounded" => bounded_problem(d),
        "unbounded" => unbounded_problem(d),
        "heat" => heat_oracle_problem(d),
        other => Err(Error::Unknown {
            kind: "problem",
            name: other.to_string(),
        }),
    }
}

/// Rebuilds a model from its [`Model::id`] (`label:dim`).
pub fn model_by_id(id: &str) -> Result<Arc<dyn Model>> {
    let unknown = || Error::Unknown {
        kind: "model id",
        name: id.to_string(),
    };
    let (label, dim) = id.split_once(':').ok_or_else(unknown)?;
    let d: usize = dim.parse().map_err(|_| unknown())?;
    Ok(problem_by_label(label, d)?.model)
}

/// PDE residual `∂_t u + μ·D_x u + ½ Tr(σσᵀ D²_x u) - f(t, x, u, σᵀ D_x u)`
/// of the model's closed-form solution, with all derivatives of `u` taken
/// by central finite differences. `None` when no solution is known.
pub fn pde_residual_fd(model: &dyn Model, t: f64, x: &[f64]) -> Option<f64> {
    let d = model.dim();
    let u = |t: f64, x: &[f64]| model.solution(t, x);
    let u0 = u(t, x)?;
    let ht = 1e-5;
    let hx = 1e-5;
    let h2 = 1e-4;
    let dt_u = (u(t + ht, x)? - u(t - ht, x)?) / (2.0 * ht);

    let mut xp = x.to_vec();
    let mut grad = vec![0.0; d];
    for i in 0..d {
        xp[i] = x[i] + hx;
        let up = u(t, &xp)?;
        xp[i] = x[i] - hx;
        let um = u(t, &xp)?;
        xp[i] = x[i];
        grad[i] = (up - um) / (2.0 * hx);
    }

    let mut sigma = vec![0.0; d * d];
    model.diffusion(t, x, &mut sigma);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
        }
    }
    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            let aij = a[i * d + j];
            if aij == 0.0 {
                continue;
            }
            let hij = if i == j {
                xp[i] = x[i] + h2;
                let up = u(t, &xp)?;
                xp[i] = x[i] - h2;
                let um = u(t, &xp)?;
                xp[i] = x[i];
                (up - 2.0 * u0 + um) / (h2 * h2)
            } else {
                let mut eval = |si: f64, sj: f64| {
                    xp[i] = x[i] + si * h2;
                    xp[j] = x[j] + sj * h2;
                    let v = u(t, &xp);
                    xp[i] = x[i];
                    xp[j] = x[j];
                    v
                };
                (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?) / (4.0 * h2 * h2)
            };
            trace += aij * hij;
        }
    }

    let mut mu = vec![0.0; d];
    model.drift(t, x, &mut mu);
    let drift_term: f64 = mu.iter().zip(&grad).map(|(m, g)| m * g).sum();
    let mut z = vec![0.0; d];
    model.diffusion_tmul(t, x, &grad, &mut z);
    Some(dt_u + drift_term + 0.5 * trace - model.generator(t, x, u0, &z))
}
