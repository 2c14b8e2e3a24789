//! Neural-network solvers for semilinear parabolic PDEs through their
//! backward SDE representation.
//!
//! For a model `dX = μ(t, X) dt + σ(t, X) dW` and generator `f`, the solvers
//! learn `u(t_i, ·)` and `Z = σᵀ D_x u(t_i, ·)` on a time grid so that
//! `Y_t = u(t, X_t)` solves `dY = f(t, X, Y, Z) dt + Z·dW`, `Y_T = g(X_T)`.
//!
//! * [`stochastics`]: time grids, Brownian increments, Euler paths, models;
//! * [`neuralnet`]: small feedforward networks with exact gradients;
//! * [`optimizer`]: Adam and the learning-rate schedule;
//! * [`schemes`]: the five solvers, their losses and saved solutions;
//! * [`problems`]: benchmark models with closed-form solutions;
//! * [`bench`]: repeated-run experiments and reports.

pub mod bench;
pub mod error;
pub mod neuralnet;
pub mod optimizer;
pub mod problems;
pub mod schemes;
pub mod stochastics;

pub use error::{Error, Result};
pub use neuralnet::{Activation, Architecture, NetworkParams};
pub use optimizer::{AdamState, TrainConfig};
pub use problems::ProblemInstance;
pub use schemes::{DsTerminal, NetworkShape, SchemeKind, SchemeSolution};
pub use stochastics::{Model, ModelSpec, PathBatch, TimeGrid};
