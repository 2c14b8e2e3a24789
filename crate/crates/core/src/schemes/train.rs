//! Training drivers.
//!
//! Every iteration draws a fresh mini-batch of paths started at `x0`. Batch
//! `s` is seeded from `(train.seed, s)` only, so iteration `s` of every time
//! step sees the same paths (common random numbers across steps). For MDBDP
//! this lets the multistep target of batch `s` be carried from step `i + 1`
//! to step `i` by subtracting a single term, instead of re-evaluating every
//! later network.
//!
//! Backward schemes warm-start step `i` from the trained step `i + 1` and
//! restart the learning-rate schedule and the Adam moments at each step.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array1;

use super::losses::{
    dbdp2_loss_grad, dbsde_loss_grad, ds_target, local_loss_grad, next_values, regression_loss_grad,
    subtract_step_term, terminal_values, NextStep,
};
use super::{DsTerminal, NetworkShape, NetworkSteps, SchemeKind, SchemeSolution};
use crate::error::{Error, Result};
use crate::neuralnet::{forward, init_params, NetworkParams};
use crate::optimizer::{lr_at, AdamState, TrainConfig};
use crate::stochastics::{derive_seed, simulate_paths_until, Model, PathBatch, TimeGrid};

/// A loss above this (or NaN) counts towards divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Consecutive bad iterations after which training gives up.
pub const DIVERGENCE_PATIENCE: usize = 50;

const TAG_INIT_U: u64 = 1;
const TAG_INIT_Z: u64 = 2;
const TAG_BATCH: u64 = 3;

/// Seed of mini-batch `s` for a run seeded with `seed`, shared by all time
/// steps.
pub fn batch_seed(seed: u64, s: usize) -> u64 {
    derive_seed(seed, &[TAG_BATCH, s as u64])
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Called before the first iteration of step `i`, with the initial
    /// parameters of that step.
    fn step_started(&mut self, _step: usize, _u: Option<&NetworkParams>, _z: Option<&NetworkParams>) {}
    /// Called when step `i` is done, with its last mini-batch loss and the
    /// current estimate of `Y_0`.
    fn step_finished(&mut self, _step: usize, _loss: f64, _y0: f64) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Logs per-step losses and timing at `info` level, at most once per
/// second apart from step 0.
pub struct LogObserver {
    scheme: SchemeKind,
    started: Instant,
    last: Option<Instant>,
}

impl LogObserver {
    pub fn new(scheme: SchemeKind) -> Self {
        Self {
            scheme,
            started: Instant::now(),
            last: None,
        }
    }
}

impl TrainObserver for LogObserver {
    fn step_finished(&mut self, step: usize, loss: f64, y0: f64) {
        let now = Instant::now();
        if step != 0 && self.last.is_some_and(|t| now.duration_since(t).as_secs_f64() < 1.0) {
            return;
        }
        self.last = Some(now);
        log::info!(
            "{} step {step}: loss {loss:.3e}, Y0 ~ {y0:.6}, elapsed {:.1}s",
            self.scheme,
            self.started.elapsed().as_secs_f64()
        );
    }
}

/// Everything a solver needs besides the observer.
#[derive(Clone)]
pub struct SolveInput {
    pub model: Arc<dyn Model>,
    pub x0: Vec<f64>,
    pub grid: TimeGrid,
    pub shape: NetworkShape,
    pub train: TrainConfig,
    pub ds_terminal: DsTerminal,
}

impl SolveInput {
    pub fn new(model: Arc<dyn Model>, x0: Vec<f64>, grid: TimeGrid, shape: NetworkShape, train: TrainConfig) -> Self {
        Self {
            model,
            x0,
            grid,
            shape,
            train,
            ds_terminal: DsTerminal::Fit,
        }
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = self.model.dim();
        if self.x0.len() != d {
            return Err(Error::DimensionMismatch {
                context: "initial point".into(),
                expected: d,
                got: self.x0.len(),
            });
        }
        if (self.grid.horizon() - self.model.horizon()).abs() > 1e-12 * self.model.horizon().abs().max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "grid ends at {} but the model horizon is {}",
                self.grid.horizon(),
                self.model.horizon()
            )));
        }
        self.shape.u_arch(d)?;
        Ok(())
    }

    fn paths(&self, iteration: usize, last: usize) -> Result<PathBatch> {
        let seed = batch_seed(self.train.seed, iteration);
        simulate_paths_until(
            self.model.as_ref(),
            &self.grid,
            &self.x0,
            self.train.batch_size,
            seed,
            last,
        )
    }

    fn init(&self, tag: u64, step: u64, z: bool) -> Result<NetworkParams> {
        let d = self.model.dim();
        let arch = if z { self.shape.z_arch(d)? } else { self.shape.u_arch(d)? };
        init_params(&arch, derive_seed(self.train.seed, &[tag, step]))
    }
}

/// Counts consecutive bad losses.
struct Guard {
    bad: usize,
}

impl Guard {
    fn new() -> Self {
        Self { bad: 0 }
    }

    /// `Ok(true)` when the update should be applied.
    fn check(&mut self, loss: f64, step: usize, iteration: usize) -> Result<bool> {
        if loss.is_finite() && loss <= DIVERGENCE_LOSS {
            self.bad = 0;
            return Ok(true);
        }
        self.bad += 1;
        if self.bad >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged { step, iteration, loss });
        }
        Ok(loss.is_finite())
    }
}

fn iterations(train: &TrainConfig, first: bool) -> usize {
    if first {
        train.final_step_iterations
    } else {
        train.iterations_per_step
    }
}

fn y0_of(net: &NetworkParams, x0: &[f64]) -> f64 {
    forward(net, x0).map(|v| v[0]).unwrap_or(f64::NAN)
}

fn finish(input: &SolveInput, scheme: SchemeKind, u: Vec<Option<NetworkParams>>, z: Vec<Option<NetworkParams>>, terminal: Option<NetworkParams>, losses: Vec<f64>) -> Result<SchemeSolution> {
    let collect = |v: Vec<Option<NetworkParams>>| -> Result<Vec<NetworkParams>> {
        v.into_iter()
            .enumerate()
            .map(|(step, n)| n.ok_or(Error::MissingNetwork { step }))
            .collect()
    };
    let sol = SchemeSolution {
        scheme,
        u_nets: collect(u)?,
        z_nets: collect(z)?,
        terminal_net: terminal,
        grid: input.grid.clone(),
        model: input.model.clone(),
        shape: input.shape.clone(),
        train: input.train.clone(),
        step_losses: losses,
    };
    sol.validate()?;
    Ok(sol)
}

/// Shared backward loop of MDBDP and DBDP1, which differ only in the target.
fn solve_pairs(input: &SolveInput, scheme: SchemeKind, observer: &mut dyn TrainObserver) -> Result<SchemeSolution> {
    input.validate()?;
    let model = input.model.as_ref();
    let n = input.grid.n_steps();
    let mut us: Vec<Option<NetworkParams>> = vec![None; n];
    let mut zs: Vec<Option<NetworkParams>> = vec![None; n];
    let mut losses = vec![f64::NAN; n];
    // MDBDP: running multistep target of batch s, valid for the step being trained
    let mut carried: Vec<Array1<f64>> = if scheme == SchemeKind::Mdbdp && n > 1 {
        vec![Array1::zeros(input.train.batch_size); input.train.iterations_per_step]
    } else {
        Vec::new()
    };
    for i in (0..n).rev() {
        let first = i == n - 1;
        let (mut u, mut z) = if first {
            (input.init(TAG_INIT_U, i as u64, false)?, input.init(TAG_INIT_Z, i as u64, true)?)
        } else {
            (us[i + 1].clone().expect("trained"), zs[i + 1].clone().expect("trained"))
        };
        observer.step_started(i, Some(&u), Some(&z));
        let total = iterations(&input.train, first);
        let mut adam_u = AdamState::for_params(&u);
        let mut adam_z = AdamState::for_params(&z);
        let mut guard = Guard::new();
        let mut last_loss = f64::NAN;
        for s in 0..total {
            let (paths, target) = match scheme {
                SchemeKind::Mdbdp if first => {
                    let paths = input.paths(s, n)?;
                    let target = terminal_values(model, &paths)?;
                    (paths, target)
                }
                SchemeKind::Mdbdp => {
                    // batch s reaches i + 2 so that step i + 1's term can be folded in
                    let paths = input.paths(s, (i + 2).min(n))?;
                    let acc = &mut carried[s];
                    if i + 2 == n {
                        *acc = terminal_values(model, &paths)?;
                    }
                    subtract_step_term(model, &NetworkSteps { u: &us, z: &zs }, &paths, i + 1, acc)?;
                    (paths, acc.clone())
                }
                _ => {
                    let paths = input.paths(s, i + 1)?;
                    let next = us[i + 1..].first().map_or(NextStep::Terminal, |n| {
                        NextStep::Network(n.as_ref().expect("trained"))
                    });
                    let (target, _) = next_values(model, next, paths.states_at(i + 1), false)?;
                    (paths, target)
                }
            };
            let (loss, gu, gz) = local_loss_grad(model, &u, &z, target.view(), &paths, i)?;
            last_loss = loss;
            if guard.check(loss, i, s)? {
                let lr = lr_at(&input.train, s, total);
                adam_u.step(&mut u, &gu, lr)?;
                adam_z.step(&mut z, &gz, lr)?;
            }
        }
        losses[i] = last_loss;
        observer.step_finished(i, last_loss, y0_of(&u, &input.x0));
        us[i] = Some(u);
        zs[i] = Some(z);
    }
    finish(input, scheme, us, zs, None, losses)
}

fn solve_dbdp2_impl(input: &SolveInput, observer: &mut dyn TrainObserver) -> Result<SchemeSolution> {
    input.validate()?;
    let model = input.model.as_ref();
    let n = input.grid.n_steps();
    let mut us: Vec<Option<NetworkParams>> = vec![None; n];
    let mut losses = vec![f64::NAN; n];
    for i in (0..n).rev() {
        let first = i == n - 1;
        let mut u = if first {
            input.init(TAG_INIT_U, i as u64, false)?
        } else {
            us[i + 1].clone().expect("trained")
        };
        observer.step_started(i, Some(&u), None);
        let total = iterations(&input.train, first);
        let mut adam = AdamState::for_params(&u);
        let mut guard = Guard::new();
        let mut last_loss = f64::NAN;
        for s in 0..total {
            let paths = input.paths(s, i + 1)?;
            let next = us[i + 1..]
                .first()
                .map_or(NextStep::Terminal, |n| NextStep::Network(n.as_ref().expect("trained")));
            let (target, _) = next_values(model, next, paths.states_at(i + 1), false)?;
            let (loss, gu) = dbdp2_loss_grad(model, &u, target.view(), &paths, i)?;
            last_loss = loss;
            if guard.check(loss, i, s)? {
                adam.step(&mut u, &gu, lr_at(&input.train, s, total))?;
            }
        }
        losses[i] = last_loss;
        observer.step_finished(i, last_loss, y0_of(&u, &input.x0));
        us[i] = Some(u);
    }
    finish(input, SchemeKind::Dbdp2, us, vec![], None, losses)
}

fn fit_regression(
    input: &SolveInput,
    mut u: NetworkParams,
    step: usize,
    total: usize,
    target_fn: &dyn Fn(&PathBatch) -> Result<Array1<f64>>,
) -> Result<(NetworkParams, f64)> {
    let mut adam = AdamState::for_params(&u);
    let mut guard = Guard::new();
    let mut last_loss = f64::NAN;
    let last = (step + 1).min(input.grid.n_steps());
    for s in 0..total {
        let paths = input.paths(s, last)?;
        let target = target_fn(&paths)?;
        let (loss, gu) = regression_loss_grad(&u, target.view(), paths.states_at(step))?;
        last_loss = loss;
        if guard.check(loss, step, s)? {
            adam.step(&mut u, &gu, lr_at(&input.train, s, total))?;
        }
    }
    Ok((u, last_loss))
}

fn solve_ds_impl(input: &SolveInput, observer: &mut dyn TrainObserver) -> Result<SchemeSolution> {
    input.validate()?;
    let model = input.model.as_ref();
    let n = input.grid.n_steps();
    if input.ds_terminal == DsTerminal::Exact {
        let x0 = &input.x0;
        if model.terminal_grad(x0).is_none() {
            return Err(Error::InvalidArgument(
                "exact terminal condition requested but the model has no closed-form terminal gradient".into(),
            ));
        }
    }
    let terminal = match input.ds_terminal {
        DsTerminal::Exact => None,
        DsTerminal::Fit => {
            let init = input.init(TAG_INIT_U, n as u64, false)?;
            observer.step_started(n, Some(&init), None);
            let target = |p: &PathBatch| -> Result<Array1<f64>> {
                Ok(next_values(model, NextStep::Terminal, p.states_at(n), false)?.0)
            };
            let (net, loss) = fit_regression(input, init, n, input.train.final_step_iterations, &target)?;
            observer.step_finished(n, loss, y0_of(&net, &input.x0));
            Some(net)
        }
    };
    let mut us: Vec<Option<NetworkParams>> = vec![None; n];
    let mut losses = vec![f64::NAN; n];
    for i in (0..n).rev() {
        let prev = if i + 1 == n { terminal.as_ref() } else { us[i + 1].as_ref() };
        let first = prev.is_none();
        let init = match prev {
            Some(p) => p.clone(),
            None => input.init(TAG_INIT_U, i as u64, false)?,
        };
        observer.step_started(i, Some(&init), None);
        let next = prev.map_or(NextStep::Terminal, NextStep::Network);
        let target = |p: &PathBatch| ds_target(model, next, p, i);
        let (net, loss) = fit_regression(input, init, i, iterations(&input.train, first), &target)?;
        losses[i] = loss;
        observer.step_finished(i, loss, y0_of(&net, &input.x0));
        us[i] = Some(net);
    }
    finish(input, SchemeKind::Ds, us, vec![], terminal, losses)
}

fn solve_dbsde_impl(input: &SolveInput, observer: &mut dyn TrainObserver) -> Result<SchemeSolution> {
    input.validate()?;
    let model = input.model.as_ref();
    let n = input.grid.n_steps();
    let mut u = input.init(TAG_INIT_U, 0, false)?;
    let mut zs = (0..n)
        .map(|i| input.init(TAG_INIT_Z, i as u64, true))
        .collect::<Result<Vec<_>>>()?;
    observer.step_started(0, Some(&u), zs.first());
    let total = input.train.final_step_iterations + (n - 1) * input.train.iterations_per_step;
    let report_every = input.train.iterations_per_step.max(1);
    let mut adam_u = AdamState::for_params(&u);
    let mut adam_z: Vec<AdamState> = zs.iter().map(AdamState::for_params).collect();
    let mut guard = Guard::new();
    let mut last_loss = f64::NAN;
    for s in 0..total {
        let paths = input.paths(s, n)?;
        let (loss, gu, gz) = dbsde_loss_grad(model, &u, &zs, &paths)?;
        last_loss = loss;
        if guard.check(loss, 0, s)? {
            let lr = lr_at(&input.train, s, total);
            adam_u.step(&mut u, &gu, lr)?;
            for ((z, a), g) in zs.iter_mut().zip(&mut adam_z).zip(&gz) {
                a.step(z, g, lr)?;
            }
        }
        if (s + 1) % report_every == 0 && s + 1 < total {
            log::debug!("dbsde iteration {}: loss {loss:.3e}, Y0 ~ {:.6}", s + 1, y0_of(&u, &input.x0));
        }
    }
    observer.step_finished(0, last_loss, y0_of(&u, &input.x0));
    finish(
        input,
        SchemeKind::Dbsde,
        vec![Some(u)],
        zs.into_iter().map(Some).collect(),
        None,
        vec![last_loss],
    )
}

/// Runs `scheme` on `input`.
pub fn solve(scheme: SchemeKind, input: &SolveInput, observer: &mut dyn TrainObserver) -> Result<SchemeSolution> {
    match scheme {
        SchemeKind::Mdbdp | SchemeKind::Dbdp1 => solve_pairs(input, scheme, observer),
        SchemeKind::Dbdp2 => solve_dbdp2_impl(input, observer),
        SchemeKind::Ds => solve_ds_impl(input, observer),
        SchemeKind::Dbsde => solve_dbsde_impl(input, observer),
    }
}

fn run(
    scheme: SchemeKind,
    model: Arc<dyn Model>,
    x0: &[f64],
    grid: &TimeGrid,
    shape: &NetworkShape,
    train: &TrainConfig,
    ds_terminal: DsTerminal,
) -> Result<SchemeSolution> {
    let mut input = SolveInput::new(model, x0.to_vec(), grid.clone(), shape.clone(), train.clone());
    input.ds_terminal = ds_terminal;
    solve(scheme, &input, &mut LogObserver::new(scheme))
}

pub fn solve_mdbdp(
    model: Arc<dyn Model>,
    x0: &[f64],
    grid: &TimeGrid,
    shape: &NetworkShape,
    train: &TrainConfig,
) -> Result<SchemeSolution> {
    run(SchemeKind::Mdbdp, model, x0, grid, shape, train, DsTerminal::Fit)
}

pub fn solve_dbdp1(
    model: Arc<dyn Model>,
    x0: &[f64],
    grid: &TimeGrid,
    shape: &NetworkShape,
    train: &TrainConfig,
) -> Result<SchemeSolution> {
    run(SchemeKind::Dbdp1, model, x0, grid, shape, train, DsTerminal::Fit)
}

pub fn solve_dbdp2(
    model: Arc<dyn Model>,
    x0: &[f64],
    grid: &TimeGrid,
    shape: &NetworkShape,
    train: &TrainConfig,
) -> Result<SchemeSolution> {
    run(SchemeKind::Dbdp2, model, x0, grid, shape, train, DsTerminal::Fit)
}

pub fn solve_ds(
    model: Arc<dyn Model>,
    x0: &[f64],
    grid: &TimeGrid,
    shape: &NetworkShape,
    train: &TrainConfig,
    terminal: DsTerminal,
) -> Result<SchemeSolution> {
    run(SchemeKind::Ds, model, x0, grid, shape, train, terminal)
}

pub fn solve_dbsde(
    model: Arc<dyn Model>,
    x0: &[f64],
    grid: &TimeGrid,
    shape: &NetworkShape,
    train: &TrainConfig,
) -> Result<SchemeSolution> {
    run(SchemeKind::Dbsde, model, x0, grid, shape, train, DsTerminal::Fit)
}
