//! Concrete models with their losses, parameters and conditioning keys.

pub mod bandit;
pub mod coin_flip;
pub mod config;
pub mod ovm;
pub mod piecewise;
pub mod sde;

use std::fmt;
use std::sync::Arc;

use crate::baselines::{KeyExtractor, SingleKey};
use crate::model::{LossSpec, StepModel};
use crate::scalar::Scalar;

pub use bandit::BanditProblem;
pub use coin_flip::{CoinFlipKeys, CoinFlipProblem};
pub use config::{build, ovm_model, ProblemConfig};
pub use ovm::{synthesize_ovm_data, OvmData, OvmProblem, OvmVehicle};
pub use piecewise::{default_piecewise_scenario, PiecewiseOdeProblem};
pub use sde::{DriftOde, SdeProblem, SdeVariant};

/// Whether the objective is minimized or maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// `+1` for minimization, `−1` for maximization.
    pub fn sign<S: Scalar>(self) -> S {
        match self {
            Sense::Minimize => S::one(),
            Sense::Maximize => -S::one(),
        }
    }
}

/// A model bundled with everything needed to run it.
#[derive(Clone)]
pub struct Problem<S: Scalar> {
    pub name: &'static str,
    pub model: Arc<dyn StepModel<S>>,
    pub loss: LossSpec<S>,
    pub x0: Vec<S>,
    pub theta0: Vec<S>,
    pub sense: Sense,
    /// Conditioning keys for baselines.
    pub keys: Arc<dyn KeyExtractor<S>>,
    /// Box constraints, one `(lo, hi)` per parameter.
    pub bounds: Vec<(S, S)>,
}

impl<S: Scalar> fmt::Debug for Problem<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("n_steps", &self.model.n_steps())
            .field("param_dim", &self.model.param_dim())
            .field("theta0", &self.theta0)
            .field("sense", &self.sense)
            .finish()
    }
}

impl<S: Scalar> Problem<S> {
    pub fn new(name: &'static str, model: Arc<dyn StepModel<S>>, loss: LossSpec<S>, x0: Vec<S>, theta0: Vec<S>) -> Self {
        let m = model.param_dim();
        Self {
            name,
            model,
            loss,
            x0,
            theta0,
            sense: Sense::Minimize,
            keys: Arc::new(SingleKey),
            bounds: vec![(S::neg_infinity(), S::infinity()); m],
        }
    }

    pub fn with_sense(mut self, sense: Sense) -> Self {
        self.sense = sense;
        self
    }

    pub fn with_keys(mut self, keys: Arc<dyn KeyExtractor<S>>) -> Self {
        self.keys = keys;
        self
    }

    pub fn with_bounds(mut self, bounds: Vec<(S, S)>) -> Self {
        self.bounds = bounds;
        self
    }

    /// Clamps `theta` into the box.
    pub fn project(&self, theta: &mut [S]) {
        for (t, &(lo, hi)) in theta.iter_mut().zip(&self.bounds) {
            *t = t.max(lo).min(hi);
        }
    }
}
