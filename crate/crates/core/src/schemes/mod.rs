//! The five backward-SDE solvers.
//!
//! | scheme | trained per step | `Z_i` |
//! |--------|------------------|-------|
//! | `mdbdp` | `(U_i, Z_i)` against the multistep target built from all later steps | `Z_i` network |
//! | `dbdp1` | `(U_i, Z_i)` against `Û_{i+1}(X_{i+1})` | `Z_i` network |
//! | `dbdp2` | `U_i` against `Û_{i+1}(X_{i+1})` | `σᵀ D_x U_i` |
//! | `ds` | `U_i` by regression on an explicit target | `σᵀ D_x U_i` |
//! | `dbsde` | `(U_0, Z_0..Z_{N-1})` jointly, forward shooting | `Z_i` network |
//!
//! Storage conventions of [`SchemeSolution`]:
//! * `mdbdp`, `dbdp1`: `N` value networks and `N` gradient networks;
//! * `dbdp2`: `N` value networks, no gradient networks;
//! * `ds`: `N` value networks, plus the fitted terminal network unless `g`
//!   is used directly;
//! * `dbsde`: a single value network for `t_0` and `N` gradient networks.

mod losses;
mod persist;
mod train;

pub use losses::{
    dbdp2_loss_grad, dbsde_loss_grad, ds_target, generator_batch, local_loss_grad, loss_dbdp1, loss_dbdp2,
    loss_dbsde, loss_ds, loss_mdbdp, loss_mdbdp_with, mdbdp_target, next_values, regression_loss_grad,
    subtract_step_term, terminal_values, GeneratorBatch, NextStep,
};
pub use persist::SolutionManifest;
pub use train::{
    batch_seed, solve, solve_dbdp1, solve_dbdp2, solve_dbsde, solve_ds, solve_mdbdp, LogObserver, NoopObserver, SolveInput,
    TrainObserver, DIVERGENCE_LOSS, DIVERGENCE_PATIENCE,
};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{forward_batch, value_and_input_grad, Activation, Architecture, NetworkParams};
use crate::optimizer::TrainConfig;
use crate::stochastics::{Model, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Mdbdp,
    Dbdp1,
    Dbdp2,
    Ds,
    Dbsde,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Mdbdp,
        SchemeKind::Dbdp1,
        SchemeKind::Dbdp2,
        SchemeKind::Ds,
        SchemeKind::Dbsde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Mdbdp => "mdbdp",
            SchemeKind::Dbdp1 => "dbdp1",
            SchemeKind::Dbdp2 => "dbdp2",
            SchemeKind::Ds => "ds",
            SchemeKind::Dbsde => "dbsde",
        }
    }

    /// Whether `Z` comes from a dedicated network rather than `σᵀ D_x U`.
    pub fn has_z_networks(self) -> bool {
        matches!(self, SchemeKind::Mdbdp | SchemeKind::Dbdp1 | SchemeKind::Dbsde)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Unknown {
                kind: "scheme",
                name: s.to_string(),
            })
    }
}

/// Hidden layers and activation shared by the value and gradient networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetworkShape {
    /// Two tanh hidden layers of `d + 10` neurons.
    pub fn default_for(d: usize) -> Self {
        Self {
            hidden: vec![d + 10, d + 10],
            activation: Activation::Tanh,
        }
    }

    pub fn u_arch(&self, d: usize) -> Result<Architecture> {
        Architecture::new(d, self.hidden.clone(), 1, self.activation)
    }

    pub fn z_arch(&self, d: usize) -> Result<Architecture> {
        Architecture::new(d, self.hidden.clone(), d, self.activation)
    }
}

/// Where Deep Splitting gets `Û_N` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsTerminal {
    /// Regress a network on `g(X_N)`.
    #[default]
    Fit,
    /// Use `g` and its closed-form gradient directly.
    Exact,
}

/// Per-step value and `Z` functions evaluated on a batch.
pub trait StepFunctions {
    fn value(&self, step: usize, x: ArrayView2<'_, f64>) -> Result<Array1<f64>>;
    fn z(&self, step: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Trained (or partially trained) `(Û_j, Ẑ_j)` networks indexed by step.
pub struct NetworkSteps<'a> {
    pub u: &'a [Option<NetworkParams>],
    pub z: &'a [Option<NetworkParams>],
}

impl StepFunctions for NetworkSteps<'_> {
    fn value(&self, step: usize, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let net = self
            .u
            .get(step)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingNetwork { step })?;
        Ok(forward_batch(net, x)?.column(0).to_owned())
    }

    fn z(&self, step: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let net = self
            .z
            .get(step)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingNetwork { step })?;
        forward_batch(net, x)
    }
}

/// The model's closed-form `u(t_j, ·)` and `σᵀ D_x u(t_j, ·)`.
pub struct AnalyticSteps<'a> {
    pub model: &'a dyn Model,
    pub grid: &'a TimeGrid,
}

impl StepFunctions for AnalyticSteps<'_> {
    fn value(&self, step: usize, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let t = self.grid.t(step);
        x.rows()
            .into_iter()
            .map(|row| {
                self.model
                    .solution(t, &row.to_vec())
                    .ok_or(Error::MissingNetwork { step })
            })
            .collect::<Result<Vec<f64>>>()
            .map(Array1::from)
    }

    fn z(&self, step: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let t = self.grid.t(step);
        let mut out = Array2::<f64>::zeros(x.raw_dim());
        for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
            let z = self
                .model
                .solution_z(t, &row.to_vec())
                .ok_or(Error::MissingNetwork { step })?;
            o.assign(&Array1::from(z));
        }
        Ok(out)
    }
}

/// Output of a solver: trained approximators of `u(t_i, ·)` and
/// `σᵀ D_x u(t_i, ·)` on the grid.
#[derive(Clone)]
pub struct SchemeSolution {
    pub scheme: SchemeKind,
    pub u_nets: Vec<NetworkParams>,
    pub z_nets: Vec<NetworkParams>,
    /// Deep Splitting's fitted `Û_N`, when it was trained.
    pub terminal_net: Option<NetworkParams>,
    pub grid: TimeGrid,
    pub model: Arc<dyn Model>,
    pub shape: NetworkShape,
    pub train: TrainConfig,
    /// Last mini-batch loss of each trained step (a single entry for dbsde).
    pub step_losses: Vec<f64>,
}

impl fmt::Debug for SchemeSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchemeSolution")
            .field("scheme", &self.scheme)
            .field("u_nets", &self.u_nets.len())
            .field("z_nets", &self.z_nets.len())
            .field("terminal_net", &self.terminal_net.is_some())
            .field("n_steps", &self.grid.n_steps())
            .field("model", &self.model.id())
            .finish()
    }
}

impl SchemeSolution {
    /// Checks list lengths against the scheme's storage convention and every
    /// network against the model dimension.
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_steps();
        let d = self.model.dim();
        let (nu, nz) = match self.scheme {
            SchemeKind::Mdbdp | SchemeKind::Dbdp1 => (n, n),
            SchemeKind::Dbdp2 | SchemeKind::Ds => (n, 0),
            SchemeKind::Dbsde => (1, n),
        };
        if self.u_nets.len() != nu {
            return Err(Error::DimensionMismatch {
                context: format!("{} value networks", self.scheme),
                expected: nu,
                got: self.u_nets.len(),
            });
        }
        if self.z_nets.len() != nz {
            return Err(Error::DimensionMismatch {
                context: format!("{} gradient networks", self.scheme),
                expected: nz,
                got: self.z_nets.len(),
            });
        }
        if self.terminal_net.is_some() && self.scheme != SchemeKind::Ds {
            return Err(Error::InvalidArgument(format!(
                "{} solutions carry no terminal network",
                self.scheme
            )));
        }
        for net in self.u_nets.iter().chain(&self.terminal_net) {
            let a = net.arch();
            if a.input_dim != d || a.output_dim != 1 {
                return Err(Error::DimensionMismatch {
                    context: "value network shape".into(),
                    expected: d,
                    got: a.input_dim,
                });
            }
        }
        for net in &self.z_nets {
            let a = net.arch();
            if a.input_dim != d || a.output_dim != d {
                return Err(Error::DimensionMismatch {
                    context: "gradient network shape".into(),
                    expected: d,
                    got: a.output_dim,
                });
            }
        }
        Ok(())
    }

    fn out_of_range(&self, step: usize, detail: &'static str) -> Error {
        Error::OutOfRange {
            scheme: self.scheme.name(),
            step,
            detail,
        }
    }

    /// `(Û_i(x), Ẑ_i(x))`.
    pub fn evaluate(&self, i: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.grid.n_steps();
        if i >= n {
            return Err(self.out_of_range(i, "valid steps are 0..N-1"));
        }
        if self.scheme == SchemeKind::Dbsde && i > 0 {
            return Err(self.out_of_range(i, "the value is only learned at t_0"));
        }
        let d = self.model.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "evaluation point".into(),
                expected: d,
                got: x.len(),
            });
        }
        let (u, z) = self.evaluate_batch(i, ArrayView2::from_shape((1, d), x).expect("row"))?;
        Ok((u[0], z.row(0).to_vec()))
    }

    /// `Ẑ_i(x)` only; valid for every step including `i > 0` for dbsde.
    pub fn evaluate_z(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        if i >= self.grid.n_steps() {
            return Err(self.out_of_range(i, "valid steps are 0..N-1"));
        }
        let d = self.model.dim();
        let z = self.z_batch(i, ArrayView2::from_shape((1, d), x).map_err(|_| Error::DimensionMismatch {
            context: "evaluation point".into(),
            expected: d,
            got: x.len(),
        })?)?;
        Ok(z.row(0).to_vec())
    }

    fn z_batch(&self, i: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if self.scheme.has_z_networks() {
            return forward_batch(&self.z_nets[i], x);
        }
        let (_, grad) = value_and_input_grad(&self.u_nets[i], x)?;
        let t = self.grid.t(i);
        let mut z = Array2::<f64>::zeros(grad.raw_dim());
        for ((xr, gr), mut zr) in x.rows().into_iter().zip(grad.rows()).zip(z.rows_mut()) {
            self.model.diffusion_tmul(
                t,
                &xr.to_vec(),
                gr.as_slice().expect("contiguous"),
                zr.as_slice_mut().expect("contiguous"),
            );
        }
        Ok(z)
    }

    /// Batched form of [`SchemeSolution::evaluate`].
    pub fn evaluate_batch(&self, i: usize, x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let n = self.grid.n_steps();
        if i >= n {
            return Err(self.out_of_range(i, "valid steps are 0..N-1"));
        }
        if self.scheme == SchemeKind::Dbsde && i > 0 {
            return Err(self.out_of_range(i, "the value is only learned at t_0"));
        }
        let u = forward_batch(&self.u_nets[i], x)?.column(0).to_owned();
        Ok((u, self.z_batch(i, x)?))
    }

    /// The estimate `Û_0(x0)` of `u(0, x0)`.
    pub fn y0(&self, x0: &[f64]) -> Result<f64> {
        let net = self.u_nets.first().ok_or(Error::MissingNetwork { step: 0 })?;
        Ok(crate::neuralnet::forward(net, x0)?[0])
    }
}
