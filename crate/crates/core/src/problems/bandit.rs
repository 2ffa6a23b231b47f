//! One pull of a multi-armed bandit with softmax policy and fixed rewards.

use std::sync::Arc;

use rand::RngCore;

use crate::baselines::SingleKey;
use crate::distributions::{categorical_sample, categorical_score, softmax};
use crate::error::{Error, Result};
use crate::model::{LogProb, LossSpec, StepContext, StepModel, StepVjp};
use crate::problems::{Problem, Sense};
use crate::rng::open_uniform;
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct BanditProblem<S> {
    pub rewards: Vec<S>,
}

impl<S: Scalar> Default for BanditProblem<S> {
    fn default() -> Self {
        Self {
            rewards: vec![S::zero(), S::of(0.7), S::one()],
        }
    }
}

impl<S: Scalar> BanditProblem<S> {
    pub fn new(rewards: Vec<S>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::invalid("rewards", "at least one arm is required"));
        }
        if !rewards.iter().all(|r| r.is_finite()) {
            return Err(Error::non_finite("rewards", None));
        }
        Ok(Self { rewards })
    }

    pub fn arm(&self, y: &[S]) -> Result<usize> {
        let k = y.first().ok_or_else(|| Error::dim("bandit draw", 1, 0))?.as_f64();
        if k < 0.0 || k as usize >= self.rewards.len() || k.fract() != 0.0 {
            return Err(Error::OutcomeOutOfRange { outcome: k as usize, size: self.rewards.len() });
        }
        Ok(k as usize)
    }

    pub fn expected_reward(&self, theta: &[S]) -> S {
        dot(&softmax(theta), &self.rewards)
    }

    pub fn loss(&self) -> LossSpec<S> {
        let rewards = self.rewards.clone();
        LossSpec::general(
            move |xs: &[Vec<S>]| rewards[xs[0][0].as_f64() as usize],
            |xs: &[Vec<S>]| vec![vec![S::zero()]; xs.len()],
        )
    }

    pub fn problem(&self, theta0: Vec<S>) -> Problem<S> {
        Problem::new("bandit", Arc::new(self.clone()), self.loss(), vec![S::zero()], theta0)
            .with_sense(Sense::Maximize)
            .with_keys(Arc::new(SingleKey))
    }
}

impl<S: Scalar> StepModel<S> for BanditProblem<S> {
    fn n_steps(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        self.rewards.len()
    }
    fn has_score(&self) -> bool {
        true
    }
    fn has_pathwise(&self) -> bool {
        false
    }

    fn sample_draw(&self, ctx: &StepContext<'_, S>, _: &[S], rng: &mut dyn RngCore) -> Result<Option<Vec<S>>> {
        let k = categorical_sample(ctx.theta, open_uniform(rng))?;
        Ok(Some(vec![S::of(k as f64)]))
    }

    fn step(&self, _: &StepContext<'_, S>, draw: Option<&[S]>, _: &[S]) -> Result<Vec<S>> {
        let y = draw.ok_or(Error::MissingPartial("bandit draw"))?;
        Ok(vec![S::of(self.arm(y)? as f64)])
    }

    fn log_prob(&self, ctx: &StepContext<'_, S>, draw: &[S], _: &[S]) -> Result<LogProb<S>> {
        let (value, d_theta) = categorical_score(ctx.theta, self.arm(draw)?)?;
        Ok(LogProb {
            value,
            d_theta,
            d_window: Vec::new(),
        })
    }

    fn step_vjp(&self, _: &StepContext<'_, S>, _: Option<&[S]>, _: &[S], _: &[S]) -> Result<StepVjp<S>> {
        Ok(StepVjp {
            d_theta: vec![S::zero(); self.rewards.len()],
            d_window: Vec::new(),
            nondifferentiable: false,
        })
    }

    fn draw_support(&self, _: &StepContext<'_, S>, _: &[S]) -> Option<Vec<Vec<S>>> {
        Some((0..self.rewards.len()).map(|k| vec![S::of(k as f64)]).collect())
    }
}
