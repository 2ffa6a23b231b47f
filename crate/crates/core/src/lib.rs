//! Gradient estimation for sequential stochastic models.
//!
//! A model is a chain of steps `x_i = h_i(x_{i−τ..i−1}, θ, y_i, z_i)` where the
//! draw `y_i` may come from a θ-dependent density. One reverse sweep yields an
//! unbiased gradient mixing pathwise and score-function terms; baselines,
//! exact oracles and an SGD driver sit on top.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` case.

pub mod baselines;
pub mod distributions;
pub mod error;
pub mod estimator;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use baselines::{BaselineKind, BaselineState, ReturnMode, ReturnSpec, UpdateMode};
pub use error::{Error, Result};
pub use estimator::{deterministic_adjoint, estimate_gradient, reverse_pass, GradEstimate, Weighting};
pub use model::{simulate, LossSpec, StepContext, StepModel, Trajectory};
pub use optimize::{gd_calibrate, sgd_replications, sgd_run, RunHistory, SgdConfig};
pub use oracle::{enumerate, exact_optimal_baselines, statistical_unbiasedness_test};
pub use problems::{Problem, ProblemConfig, Sense};
pub use scalar::Scalar;
pub use tape::TapeSession;

pub type Problem64 = problems::Problem<f64>;
pub type Problem32 = problems::Problem<f32>;
pub type Trajectory64 = model::Trajectory<f64>;
pub type GradEstimate64 = estimator::GradEstimate<f64>;
pub type Tape64 = tape::TapeSession<f64>;
pub type Tape32 = tape::TapeSession<f32>;
pub type BaselineState64 = baselines::BaselineState<f64>;
