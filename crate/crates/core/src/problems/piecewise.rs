//! Car-following toy with a randomized switch between a slow and a fast update.
//!
//! With `s = lead_{i−1} − x_{i−1}` the step is slow (`x + θ₁`) with probability
//! `Φ((θ₀ − s)/θ₂)` and fast (`x + 1`) otherwise. As `θ₂ → 0` this becomes the
//! deterministic rule "slow iff the gap is below θ₀".

use std::sync::Arc;

use rand::RngCore;

use crate::distributions::{probit_switch, ProbitSwitch};
use crate::error::{Error, Result};
use crate::model::{LogProb, LossSpec, StepContext, StepModel, StepVjp};
use crate::problems::Problem;
use crate::rng::open_uniform;
use crate::scalar::Scalar;

pub const SLOW: usize = 0;
pub const FAST: usize = 1;

/// Smallest switch scale allowed during optimization.
pub const SCALE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseOdeProblem<S> {
    /// Lead positions `lead_0 .. lead_n`.
    pub lead: Vec<S>,
    /// Targets for `x_1 .. x_n`.
    pub targets: Vec<S>,
    pub fast_speed: S,
}

impl<S: Scalar> PiecewiseOdeProblem<S> {
    pub fn new(lead: Vec<S>, targets: Vec<S>) -> Result<Self> {
        if lead.len() < 2 {
            return Err(Error::invalid("lead", "need at least two positions"));
        }
        if targets.len() + 1 != lead.len() {
            return Err(Error::dim("targets", lead.len() - 1, targets.len()));
        }
        if !lead.iter().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::non_finite("piecewise scenario", None));
        }
        Ok(Self {
            lead,
            targets,
            fast_speed: S::one(),
        })
    }

    fn switch(&self, ctx: &StepContext<'_, S>) -> ProbitSwitch<S> {
        ProbitSwitch {
            threshold: ctx.theta[0],
            scale: ctx.theta[2],
            signal: self.lead[ctx.step - 1] - ctx.prev()[0],
        }
    }

    fn branch(draw: Option<&[S]>) -> Result<usize> {
        let y = draw.ok_or(Error::MissingPartial("piecewise draw"))?;
        match y.first().map(|v| v.as_f64()) {
            Some(v) if v == 0.0 => Ok(SLOW),
            Some(v) if v == 1.0 => Ok(FAST),
            Some(v) => Err(Error::OutcomeOutOfRange { outcome: v as usize, size: 2 }),
            None => Err(Error::dim("piecewise draw", 1, 0)),
        }
    }

    /// Positions `x_1 .. x_n` under the hard rule with threshold `theta0`.
    pub fn deterministic_path(&self, x0: S, theta0: S, theta1: S) -> Vec<S> {
        let mut x = x0;
        (1..self.lead.len())
            .map(|i| {
                x = if self.lead[i - 1] - x < theta0 { x + theta1 } else { x + self.fast_speed };
                x
            })
            .collect()
    }

    pub fn loss(&self) -> LossSpec<S> {
        let t = self.targets.clone();
        let t2 = self.targets.clone();
        LossSpec::summable(
            move |i, x: &[S]| (x[0] - t[i - 1]).powi(2),
            move |i, x| vec![S::of(2.0) * (x[0] - t2[i - 1])],
        )
    }

    pub fn problem(&self, x0: S, theta0: Vec<S>) -> Problem<S> {
        let inf = S::infinity();
        Problem::new("piecewise", Arc::new(self.clone()), self.loss(), vec![x0], theta0)
            .with_bounds(vec![(-inf, inf), (-inf, inf), (S::of(SCALE_FLOOR), inf)])
    }
}

/// Default scenario: 8 steps, initial gap 2.05, lead speed 1 for 4 steps then
/// 0.1, targets from the hard rule at `θ₀ = 1.6, θ₁ = 0.1`.
///
/// Every threshold in `(1.15, 2.05]` reproduces the targets; `θ₀ = 2.1` makes
/// the first step slow.
pub fn default_piecewise_scenario<S: Scalar>() -> PiecewiseOdeProblem<S> {
    let n = 8;
    let mut lead = vec![S::of(2.05)];
    for i in 1..=n {
        let v = if i <= 4 { 1.0 } else { 0.1 };
        lead.push(lead[i - 1] + S::of(v));
    }
    let shell = PiecewiseOdeProblem {
        lead: lead.clone(),
        targets: vec![S::zero(); n],
        fast_speed: S::one(),
    };
    let targets = shell.deterministic_path(S::zero(), S::of(1.6), S::of(0.1));
    PiecewiseOdeProblem {
        lead,
        targets,
        fast_speed: S::one(),
    }
}

impl<S: Scalar> StepModel<S> for PiecewiseOdeProblem<S> {
    fn n_steps(&self) -> usize {
        self.targets.len()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        3
    }
    fn has_score(&self) -> bool {
        true
    }
    fn has_pathwise(&self) -> bool {
        true
    }

    fn sample_draw(&self, ctx: &StepContext<'_, S>, _: &[S], rng: &mut dyn RngCore) -> Result<Option<Vec<S>>> {
        let p = probit_switch(&self.switch(ctx))?.p;
        let y = if open_uniform(rng) < p.as_f64() { SLOW } else { FAST };
        Ok(Some(vec![S::of(y as f64)]))
    }

    fn step(&self, ctx: &StepContext<'_, S>, draw: Option<&[S]>, _: &[S]) -> Result<Vec<S>> {
        let x = ctx.prev()[0];
        Ok(vec![match Self::branch(draw)? {
            SLOW => x + ctx.theta[1],
            _ => x + self.fast_speed,
        }])
    }

    fn log_prob(&self, ctx: &StepContext<'_, S>, draw: &[S], _: &[S]) -> Result<LogProb<S>> {
        let y = Self::branch(Some(draw))?;
        let ev = probit_switch(&self.switch(ctx))?;
        let d = ev.partials[y];
        Ok(LogProb {
            value: ev.log_pmf[y],
            d_theta: vec![d.threshold, S::zero(), d.scale],
            d_window: vec![vec![-d.signal]],
        })
    }

    fn step_vjp(&self, _: &StepContext<'_, S>, draw: Option<&[S]>, _: &[S], cot: &[S]) -> Result<StepVjp<S>> {
        let slow = Self::branch(draw)? == SLOW;
        Ok(StepVjp {
            d_theta: vec![S::zero(), if slow { cot[0] } else { S::zero() }, S::zero()],
            d_window: vec![vec![cot[0]]],
            nondifferentiable: false,
        })
    }

    fn draw_support(&self, _: &StepContext<'_, S>, _: &[S]) -> Option<Vec<Vec<S>>> {
        Some(vec![vec![S::zero()], vec![S::one()]])
    }
}
