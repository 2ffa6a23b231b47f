//! Sequential stochastic models `x_i = h_i(x_{i−τ..i−1}, θ, y_i, z_i)` with
//! `y_i ∼ p_i(· | x_{i−τ..i−1}, θ, z_i)`, losses, and recorded trajectories.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// Inputs shared by every callback of step `i`.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a, S> {
    /// 1-based step index.
    pub step: usize,
    /// The last τ states `x_{i−τ} .. x_{i−1}`, oldest first, padded with `x_0`.
    pub window: &'a [&'a [S]],
    pub theta: &'a [S],
}

impl<'a, S> StepContext<'a, S> {
    /// The most recent state `x_{i−1}`.
    pub fn prev(&self) -> &'a [S] {
        self.window[self.window.len() - 1]
    }
}

/// Log-density of a draw with partials.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProb<S> {
    pub value: S,
    pub d_theta: Vec<S>,
    /// One entry per window slot, oldest first. Empty if `p_i` ignores the states.
    pub d_window: Vec<Vec<S>>,
}

/// `cotᵀ ∂h_i/∂θ` and `cotᵀ ∂h_i/∂x_{i−l}` for each window slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepVjp<S> {
    pub d_theta: Vec<S>,
    /// One entry per window slot, oldest first. Empty if `h_i` ignores the states.
    pub d_window: Vec<Vec<S>>,
    /// Set when the step sat on a kink (e.g. a min/max tie).
    pub nondifferentiable: bool,
}

/// The pair `(h_i, p_i)` with analytic partials.
///
/// Implementations must not let the support of `y_i` depend on θ.
pub trait StepModel<S: Scalar>: Send + Sync {
    fn n_steps(&self) -> usize;

    fn lag(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize;

    fn param_dim(&self) -> usize;

    /// True when some step draws `y_i` from a θ- or x-dependent density.
    fn has_score(&self) -> bool;

    /// True when some `h_i` depends on θ or the previous states.
    fn has_pathwise(&self) -> bool;

    /// Draws the θ-independent noise `z_i`.
    fn sample_noise(&self, _ctx: &StepContext<'_, S>, _rng: &mut dyn RngCore) -> Vec<S> {
        Vec::new()
    }

    /// Draws `y_i`, or `None` on steps without a score density.
    fn sample_draw(
        &self,
        _ctx: &StepContext<'_, S>,
        _noise: &[S],
        _rng: &mut dyn RngCore,
    ) -> Result<Option<Vec<S>>> {
        Ok(None)
    }

    fn step(&self, ctx: &StepContext<'_, S>, draw: Option<&[S]>, noise: &[S]) -> Result<Vec<S>>;

    fn log_prob(&self, _ctx: &StepContext<'_, S>, _draw: &[S], _noise: &[S]) -> Result<LogProb<S>> {
        Err(Error::MissingPartial("log_prob"))
    }

    fn step_vjp(
        &self,
        ctx: &StepContext<'_, S>,
        draw: Option<&[S]>,
        noise: &[S],
        cot: &[S],
    ) -> Result<StepVjp<S>>;

    /// Full finite support of `y_i`, if it has one.
    fn draw_support(&self, _ctx: &StepContext<'_, S>, _noise: &[S]) -> Option<Vec<Vec<S>>> {
        None
    }
}

/// Per-step loss `f_i(x_i)`.
pub trait StepLoss<S: Scalar>: Send + Sync {
    fn value(&self, step: usize, x: &[S]) -> S;
    fn grad(&self, step: usize, x: &[S]) -> Vec<S>;
}

/// Loss on the whole path `f(x_1, …, x_n)`.
pub trait TotalLoss<S: Scalar>: Send + Sync {
    /// `states` holds `x_1 .. x_n`.
    fn value(&self, states: &[Vec<S>]) -> S;
    /// One gradient per state in `states`.
    fn grad(&self, states: &[Vec<S>]) -> Vec<Vec<S>>;
}

type StepFn<S> = dyn Fn(usize, &[S]) -> S + Send + Sync;
type StepGradFn<S> = dyn Fn(usize, &[S]) -> Vec<S> + Send + Sync;
type TotalFn<S> = dyn Fn(&[Vec<S>]) -> S + Send + Sync;
type TotalGradFn<S> = dyn Fn(&[Vec<S>]) -> Vec<Vec<S>> + Send + Sync;

/// A [`StepLoss`] built from two closures.
pub struct FnStepLoss<S> {
    value: Box<StepFn<S>>,
    grad: Box<StepGradFn<S>>,
}

impl<S: Scalar> StepLoss<S> for FnStepLoss<S> {
    fn value(&self, step: usize, x: &[S]) -> S {
        (self.value)(step, x)
    }
    fn grad(&self, step: usize, x: &[S]) -> Vec<S> {
        (self.grad)(step, x)
    }
}

/// A [`TotalLoss`] built from two closures.
pub struct FnTotalLoss<S> {
    value: Box<TotalFn<S>>,
    grad: Box<TotalGradFn<S>>,
}

impl<S: Scalar> TotalLoss<S> for FnTotalLoss<S> {
    fn value(&self, states: &[Vec<S>]) -> S {
        (self.value)(states)
    }
    fn grad(&self, states: &[Vec<S>]) -> Vec<Vec<S>> {
        (self.grad)(states)
    }
}

#[derive(Clone)]
pub enum LossSpec<S: Scalar> {
    General(Arc<dyn TotalLoss<S>>),
    Summable(Arc<dyn StepLoss<S>>),
}

impl<S: Scalar> fmt::Debug for LossSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::General(_) => f.write_str("LossSpec::General"),
            LossSpec::Summable(_) => f.write_str("LossSpec::Summable"),
        }
    }
}

impl<S: Scalar> LossSpec<S> {
    pub fn summable(
        value: impl Fn(usize, &[S]) -> S + Send + Sync + 'static,
        grad: impl Fn(usize, &[S]) -> Vec<S> + Send + Sync + 'static,
    ) -> Self {
        LossSpec::Summable(Arc::new(FnStepLoss {
            value: Box::new(value),
            grad: Box::new(grad),
        }))
    }

    pub fn general(
        value: impl Fn(&[Vec<S>]) -> S + Send + Sync + 'static,
        grad: impl Fn(&[Vec<S>]) -> Vec<Vec<S>> + Send + Sync + 'static,
    ) -> Self {
        LossSpec::General(Arc::new(FnTotalLoss {
            value: Box::new(value),
            grad: Box::new(grad),
        }))
    }

    pub fn is_summable(&self) -> bool {
        matches!(self, LossSpec::Summable(_))
    }

    /// `(F, per-step losses)` for states `x_0 .. x_n`.
    pub fn evaluate(&self, states: &[Vec<S>]) -> (S, Option<Vec<S>>) {
        match self {
            LossSpec::General(l) => (l.value(&states[1..]), None),
            LossSpec::Summable(l) => {
                let per: Vec<S> = states[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| l.value(i + 1, x))
                    .collect();
                (per.iter().copied().sum(), Some(per))
            }
        }
    }

    /// `∂f/∂x_i` for `i = 1..n`, returned in that order.
    pub fn state_grads(&self, states: &[Vec<S>]) -> Vec<Vec<S>> {
        match self {
            LossSpec::General(l) => l.grad(&states[1..]),
            LossSpec::Summable(l) => states[1..]
                .iter()
                .enumerate()
                .map(|(i, x)| l.grad(i + 1, x))
                .collect(),
        }
    }
}

/// Flat parameter vector with named slices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector<S> {
    pub values: Vec<S>,
    slices: Vec<(String, Range<usize>)>,
}

impl<S: Scalar> ParamVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if !all_finite(&values) {
            return Err(Error::non_finite("parameters", None));
        }
        Ok(Self {
            values,
            slices: Vec::new(),
        })
    }

    /// Appends a named block.
    pub fn push(&mut self, name: &str, block: &[S]) -> Result<()> {
        if !all_finite(block) {
            return Err(Error::non_finite(name, None));
        }
        let start = self.values.len();
        self.values.extend_from_slice(block);
        self.slices.push((name.to_owned(), start..self.values.len()));
        Ok(())
    }

    pub fn slice(&self, name: &str) -> Option<&[S]> {
        self.slices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| &self.values[r.clone()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }
}

/// A recorded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    /// `x_0 .. x_n`.
    pub states: Vec<Vec<S>>,
    /// `z_1 .. z_n`.
    pub noises: Vec<Vec<S>>,
    /// `y_1 .. y_n`; `None` on steps without a score density.
    pub draws: Vec<Option<Vec<S>>>,
    pub log_probs: Vec<Option<S>>,
    /// `f_1 .. f_n` for summable losses.
    pub step_losses: Option<Vec<S>>,
    pub objective: S,
}

impl<S: Scalar> Trajectory<S> {
    pub fn n_steps(&self) -> usize {
        self.noises.len()
    }

    pub fn draw(&self, step: usize) -> Option<&[S]> {
        self.draws[step - 1].as_deref()
    }

    pub fn noise(&self, step: usize) -> &[S] {
        &self.noises[step - 1]
    }
}

/// The τ states preceding step `i` (1-based), oldest first, padded with `x_0`.
pub fn window_of<S>(states: &[Vec<S>], step: usize, lag: usize) -> Vec<&[S]> {
    (0..lag)
        .map(|l| {
            let idx = step as isize - lag as isize + l as isize;
            states[idx.max(0) as usize].as_slice()
        })
        .collect()
}

/// State index fed into window slot `l` at step `i`; `None` for `x_0` padding.
pub fn window_index(step: usize, lag: usize, slot: usize) -> Option<usize> {
    let idx = step as isize - lag as isize + slot as isize;
    (idx > 0).then_some(idx as usize)
}

fn check_model<S: Scalar>(model: &dyn StepModel<S>, theta: &[S], x0: &[S]) -> Result<()> {
    if model.lag() == 0 {
        return Err(Error::invalid("lag", "must be at least 1"));
    }
    if theta.len() != model.param_dim() {
        return Err(Error::dim("theta", model.param_dim(), theta.len()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::dim("x0", model.state_dim(), x0.len()));
    }
    if !all_finite(theta) {
        return Err(Error::non_finite("theta", None));
    }
    Ok(())
}

/// Runs the model forward with a fresh RNG seeded from `seed`.
pub fn simulate<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    seed: u64,
) -> Result<Trajectory<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with(model, loss, theta, x0, &mut rng)
}

pub fn simulate_with<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    rng: &mut dyn RngCore,
) -> Result<Trajectory<S>> {
    check_model(model, theta, x0)?;
    let n = model.n_steps();
    let lag = model.lag();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    let mut noises = Vec::with_capacity(n);
    let mut draws = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    for i in 1..=n {
        let window = window_of(&states, i, lag);
        let ctx = StepContext {
            step: i,
            window: &window,
            theta,
        };
        let z = model.sample_noise(&ctx, rng);
        let y = model.sample_draw(&ctx, &z, rng)?;
        let lp = match &y {
            Some(y) => Some(model.log_prob(&ctx, y, &z)?.value),
            None => None,
        };
        let x = model.step(&ctx, y.as_deref(), &z)?;
        if x.len() != model.state_dim() {
            return Err(Error::dim("state", model.state_dim(), x.len()));
        }
        if !all_finite(&x) {
            return Err(Error::non_finite("state", Some(i)));
        }
        states.push(x);
        noises.push(z);
        draws.push(y);
        log_probs.push(lp);
    }
    let (objective, step_losses) = loss.evaluate(&states);
    if !objective.is_finite() {
        return Err(Error::non_finite("objective", None));
    }
    Ok(Trajectory {
        states,
        noises,
        draws,
        log_probs,
        step_losses,
        objective,
    })
}

/// Re-runs the stored draws and noises at `theta`.
pub fn replay<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    traj: &Trajectory<S>,
) -> Result<Trajectory<S>> {
    let x0 = traj
        .states
        .first()
        .ok_or_else(|| Error::dim("trajectory states", model.n_steps() + 1, 0))?;
    check_model(model, theta, x0)?;
    let n = model.n_steps();
    if traj.noises.len() != n || traj.draws.len() != n {
        return Err(Error::dim("trajectory steps", n, traj.noises.len()));
    }
    let lag = model.lag();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    let mut log_probs = Vec::with_capacity(n);
    for i in 1..=n {
        let window = window_of(&states, i, lag);
        let ctx = StepContext {
            step: i,
            window: &window,
            theta,
        };
        let z = &traj.noises[i - 1];
        let y = traj.draws[i - 1].as_deref();
        let lp = match y {
            Some(y) => Some(model.log_prob(&ctx, y, z)?.value),
            None => None,
        };
        let x = model.step(&ctx, y, z)?;
        if !all_finite(&x) {
            return Err(Error::non_finite("state", Some(i)));
        }
        states.push(x);
        log_probs.push(lp);
    }
    let (objective, step_losses) = loss.evaluate(&states);
    Ok(Trajectory {
        states,
        noises: traj.noises.clone(),
        draws: traj.draws.clone(),
        log_probs,
        step_losses,
        objective,
    })
}
