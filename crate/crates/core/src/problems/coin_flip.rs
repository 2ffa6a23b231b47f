//! Two flips of a coin with logits `θ = [θ_tails, θ_heads]`; paid 1 for two
//! tails, 2 for two heads and 4 for a mixed outcome.

use std::sync::Arc;

use rand::RngCore;

use crate::baselines::{Key, KeyExtractor, PartialPath};
use crate::distributions::{categorical_sample, categorical_score, softmax};
use crate::error::{Error, Result};
use crate::model::{LogProb, LossSpec, StepContext, StepModel, StepVjp};
use crate::problems::{Problem, Sense};
use crate::rng::open_uniform;
use crate::scalar::Scalar;

pub const TAILS: usize = 0;
pub const HEADS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CoinFlipProblem<S> {
    /// Payoffs for TT, HH and mixed.
    pub payoff: [S; 3],
}

impl<S: Scalar> Default for CoinFlipProblem<S> {
    fn default() -> Self {
        Self {
            payoff: [S::one(), S::of(2.0), S::of(4.0)],
        }
    }
}

fn outcome<S: Scalar>(y: &[S]) -> Result<usize> {
    let k = y.first().ok_or_else(|| Error::dim("coin flip draw", 1, 0))?.as_f64();
    match k {
        v if v == 0.0 => Ok(TAILS),
        v if v == 1.0 => Ok(HEADS),
        _ => Err(Error::OutcomeOutOfRange { outcome: k as usize, size: 2 }),
    }
}

impl<S: Scalar> CoinFlipProblem<S> {
    pub fn payoff_of(&self, first: usize, second: usize) -> S {
        match (first, second) {
            (TAILS, TAILS) => self.payoff[0],
            (HEADS, HEADS) => self.payoff[1],
            _ => self.payoff[2],
        }
    }

    /// Probability of heads under `theta`.
    pub fn p_heads(theta: &[S]) -> S {
        softmax(theta)[HEADS]
    }

    pub fn loss(&self) -> LossSpec<S> {
        let me = self.clone();
        LossSpec::general(
            move |xs: &[Vec<S>]| {
                let a = xs[0][0].as_f64() as usize;
                let b = xs[1][0].as_f64() as usize;
                me.payoff_of(a, b)
            },
            |xs: &[Vec<S>]| vec![vec![S::zero()]; xs.len()],
        )
    }

    /// Maximization problem starting at `theta0`, keyed by `ξ_1 = ∅`, `ξ_2 = y_1`.
    pub fn problem(&self, theta0: Vec<S>) -> Problem<S> {
        Problem::new("coin_flip", Arc::new(self.clone()), self.loss(), vec![S::zero()], theta0)
            .with_sense(Sense::Maximize)
            .with_keys(Arc::new(CoinFlipKeys))
    }
}

impl<S: Scalar> StepModel<S> for CoinFlipProblem<S> {
    fn n_steps(&self) -> usize {
        2
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        2
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
        let y = draw.ok_or(Error::MissingPartial("coin flip draw"))?;
        Ok(vec![S::of(outcome(y)? as f64)])
    }

    fn log_prob(&self, ctx: &StepContext<'_, S>, draw: &[S], _: &[S]) -> Result<LogProb<S>> {
        let (value, d_theta) = categorical_score(ctx.theta, outcome(draw)?)?;
        Ok(LogProb {
            value,
            d_theta,
            d_window: Vec::new(),
        })
    }

    fn step_vjp(&self, _: &StepContext<'_, S>, _: Option<&[S]>, _: &[S], _: &[S]) -> Result<StepVjp<S>> {
        Ok(StepVjp {
            d_theta: vec![S::zero(); 2],
            d_window: Vec::new(),
            nondifferentiable: false,
        })
    }

    fn draw_support(&self, _: &StepContext<'_, S>, _: &[S]) -> Option<Vec<Vec<S>>> {
        Some(vec![vec![S::zero()], vec![S::one()]])
    }
}

/// Key 0 before the first flip; key 1 after tails, key 2 after heads.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoinFlipKeys;

impl<S: Scalar> KeyExtractor<S> for CoinFlipKeys {
    fn key(&self, path: &PartialPath<'_, S>) -> Key<S> {
        match path.draws.first().and_then(|d| d.as_ref()) {
            None => Key::Discrete(0),
            Some(y) => Key::Discrete(1 + y[0].as_f64() as usize),
        }
    }
    fn n_keys(&self) -> Option<usize> {
        Some(3)
    }
}

/// Expected payoff `E[F] = p_T² + 2 p_H² + 8 p_T p_H` in closed form.
pub fn expected_payoff(p_heads: f64) -> f64 {
    let (h, t) = (p_heads, 1.0 - p_heads);
    t * t + 2.0 * h * h + 8.0 * t * h
}
