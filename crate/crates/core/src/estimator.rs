//! The mixed pathwise/score adjoint estimator.
//!
//! For one trajectory the reverse sweep runs `i = n..1`:
//!
//! ```text
//! λ_i      += ∂f/∂x_i
//! ĝ_path   += λ_iᵀ ∂h_i/∂θ
//! score_i   = (i, W_i, ∂log p_i/∂θ)
//! λ_{i−l}  += λ_iᵀ ∂h_i/∂x_{i−l} + W_i ∂log p_i/∂x_{i−l}     (l = 1..τ)
//! ```
//!
//! `W_i` is the total objective for general losses and the tail sum
//! `Σ_{j≥i} f_j` for summable ones.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{replay, simulate, window_index, window_of, LossSpec, StepContext, StepModel, Trajectory};
use crate::rng::derive_seed;
use crate::scalar::{all_finite, axpy, Scalar};

/// One score-function component `weight · score`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTerm<S> {
    pub step: usize,
    pub weight: S,
    pub score: Vec<S>,
}

/// A single-trajectory gradient sample, kept decomposed.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate<S> {
    pub pathwise: Vec<S>,
    pub score_terms: Vec<ScoreTerm<S>>,
    pub objective: S,
    pub step_losses: Option<Vec<S>>,
    /// Set when some step hit a non-differentiable point.
    pub flagged: bool,
}

impl<S: Scalar> GradEstimate<S> {
    /// `pathwise + Σ weight_i · score_i`.
    pub fn total(&self) -> Vec<S> {
        let mut g = self.pathwise.clone();
        for t in &self.score_terms {
            axpy(t.weight, &t.score, &mut g);
        }
        g
    }

    /// Score part only: `Σ weight_i · score_i`.
    pub fn score_sum(&self) -> Vec<S> {
        let mut g = vec![S::zero(); self.pathwise.len()];
        for t in &self.score_terms {
            axpy(t.weight, &t.score, &mut g);
        }
        g
    }
}

/// Choice of score weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Tail sums for summable losses, the total objective otherwise.
    #[default]
    Auto,
    /// Always the total objective.
    Total,
}

/// Adjoints `λ_i, λ_{i−1}, …, λ_{i−τ}` during the reverse sweep.
#[derive(Debug, Clone)]
pub struct AdjointWindow<S> {
    current: usize,
    slots: VecDeque<Vec<S>>,
}

impl<S: Scalar> AdjointWindow<S> {
    pub fn new(lag: usize, dim: usize, last: usize) -> Self {
        Self {
            current: last,
            slots: (0..=lag).map(|_| vec![S::zero(); dim]).collect(),
        }
    }

    pub fn current(&self) -> &[S] {
        &self.slots[0]
    }

    pub fn current_mut(&mut self) -> &mut [S] {
        &mut self.slots[0]
    }

    /// Mutable adjoint of state `index`, which must lie in `current−τ .. current`.
    pub fn at_mut(&mut self, index: usize) -> &mut [S] {
        &mut self.slots[self.current - index]
    }

    /// Drops `λ_i` and makes `λ_{i−1}` current.
    pub fn shift(&mut self) {
        let mut v = self.slots.pop_front().expect("window is never empty");
        v.iter_mut().for_each(|x| *x = S::zero());
        self.slots.push_back(v);
        self.current -= 1;
    }
}

fn score_weights<S: Scalar>(traj: &Trajectory<S>, weighting: Weighting) -> Vec<S> {
    let n = traj.n_steps();
    match (&traj.step_losses, weighting) {
        (Some(per), Weighting::Auto) => {
            let mut w = vec![S::zero(); n];
            let mut acc = S::zero();
            for i in (0..n).rev() {
                acc += per[i];
                w[i] = acc;
            }
            w
        }
        _ => vec![traj.objective; n],
    }
}

/// Reverse sweep over a recorded trajectory.
pub fn reverse_pass<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    traj: &Trajectory<S>,
) -> Result<GradEstimate<S>> {
    reverse_pass_with(model, loss, theta, traj, Weighting::Auto)
}

pub fn reverse_pass_with<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    traj: &Trajectory<S>,
    weighting: Weighting,
) -> Result<GradEstimate<S>> {
    let n = model.n_steps();
    let lag = model.lag();
    let d = model.state_dim();
    let m = model.param_dim();
    if theta.len() != m {
        return Err(Error::dim("theta", m, theta.len()));
    }
    if traj.states.len() != n + 1 {
        return Err(Error::dim("trajectory states", n + 1, traj.states.len()));
    }
    let df = loss.state_grads(&traj.states);
    let weights = score_weights(traj, weighting);

    let mut lam = AdjointWindow::new(lag, d, n);
    let mut pathwise = vec![S::zero(); m];
    let mut score_terms = Vec::new();
    let mut flagged = false;

    for i in (1..=n).rev() {
        for (l, g) in lam.current_mut().iter_mut().zip(&df[i - 1]) {
            *l += *g;
        }
        if !all_finite(lam.current()) {
            return Err(Error::non_finite("adjoint", Some(i)));
        }
        let window = window_of(&traj.states, i, lag);
        let ctx = StepContext {
            step: i,
            window: &window,
            theta,
        };
        let draw = traj.draw(i);
        let noise = traj.noise(i);

        let cot = lam.current().to_vec();
        let vjp = model.step_vjp(&ctx, draw, noise, &cot)?;
        if vjp.d_theta.len() != m {
            return Err(Error::dim("step vjp wrt theta", m, vjp.d_theta.len()));
        }
        flagged |= vjp.nondifferentiable;
        axpy(S::one(), &vjp.d_theta, &mut pathwise);
        for (slot, dx) in vjp.d_window.iter().enumerate() {
            if let Some(idx) = window_index(i, lag, slot) {
                axpy(S::one(), dx, lam.at_mut(idx));
            }
        }

        if let Some(y) = draw {
            let lp = model.log_prob(&ctx, y, noise)?;
            if lp.d_theta.len() != m {
                return Err(Error::dim("score wrt theta", m, lp.d_theta.len()));
            }
            let w = weights[i - 1];
            for (slot, dx) in lp.d_window.iter().enumerate() {
                if let Some(idx) = window_index(i, lag, slot) {
                    axpy(w, dx, lam.at_mut(idx));
                }
            }
            score_terms.push(ScoreTerm {
                step: i,
                weight: w,
                score: lp.d_theta,
            });
        }
        lam.shift();
    }
    score_terms.reverse();
    if !all_finite(&pathwise) {
        return Err(Error::non_finite("pathwise gradient", None));
    }
    Ok(GradEstimate {
        pathwise,
        score_terms,
        objective: traj.objective,
        step_losses: traj.step_losses.clone(),
        flagged,
    })
}

/// Mean over a batch plus the per-trajectory samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate<S> {
    pub mean_gradient: Vec<S>,
    pub mean_objective: S,
    pub samples: Vec<GradEstimate<S>>,
}

/// Simulates trajectory `index` of a batch and runs the reverse sweep.
pub fn sample_estimate<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    seed: u64,
    index: u64,
) -> Result<GradEstimate<S>> {
    let traj = simulate(model, loss, theta, x0, derive_seed(seed, index))?;
    reverse_pass(model, loss, theta, &traj)
}

/// Mean gradient over `batch` trajectories with seeds derived from `(seed, index)`.
pub fn estimate_gradient<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    batch: usize,
    seed: u64,
) -> Result<BatchEstimate<S>> {
    if batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let samples = (0..batch as u64)
        .into_par_iter()
        .map(|k| sample_estimate(model, loss, theta, x0, seed, k))
        .collect::<Result<Vec<_>>>()?;
    let inv = S::one() / S::of(batch as f64);
    let mut mean_gradient = vec![S::zero(); model.param_dim()];
    let mut mean_objective = S::zero();
    for s in &samples {
        axpy(inv, &s.total(), &mut mean_gradient);
        mean_objective += s.objective * inv;
    }
    Ok(BatchEstimate {
        mean_gradient,
        mean_objective,
        samples,
    })
}

/// Running first and second moments of gradient samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Per-coordinate sample variance.
    pub variance: Vec<f64>,
    pub mean_objective: f64,
    pub objective_variance: f64,
    pub flagged: usize,
}

impl GradStats {
    /// Standard error of each coordinate of the mean.
    pub fn std_error(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| (v / self.count as f64).sqrt())
            .collect()
    }
}

#[derive(Clone)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    obj: f64,
    obj_sq: f64,
    flagged: usize,
}

impl Moments {
    fn new(m: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; m],
            sum_sq: vec![0.0; m],
            obj: 0.0,
            obj_sq: 0.0,
            flagged: 0,
        }
    }

    fn push(&mut self, g: &[f64], f: f64, flagged: bool) {
        self.n += 1;
        for ((s, q), &v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(g) {
            *s += v;
            *q += v * v;
        }
        self.obj += f;
        self.obj_sq += f * f;
        self.flagged += flagged as usize;
    }

    fn merge(mut self, other: &Moments) -> Self {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.obj += other.obj;
        self.obj_sq += other.obj_sq;
        self.flagged += other.flagged;
        self
    }

    fn finish(self) -> GradStats {
        let n = self.n as f64;
        let var = |s: f64, q: f64| ((q - s * s / n) / (n - 1.0)).max(0.0);
        GradStats {
            count: self.n,
            mean: self.sum.iter().map(|s| s / n).collect(),
            variance: self
                .sum
                .iter()
                .zip(&self.sum_sq)
                .map(|(&s, &q)| var(s, q))
                .collect(),
            mean_objective: self.obj / n,
            objective_variance: var(self.obj, self.obj_sq),
            flagged: self.flagged,
        }
    }
}

const CHUNK: u64 = 1024;

/// Streams `count` samples of `sample(index) -> (gradient, objective, flagged)`
/// through fixed-size chunks; the reduction order depends only on `count`.
pub fn stream_stats<F>(m: usize, count: usize, sample: F) -> Result<GradStats>
where
    F: Fn(u64) -> Result<(Vec<f64>, f64, bool)> + Sync,
{
    if count < 2 {
        return Err(Error::InsufficientSamples { got: count, min: 2 });
    }
    let n = count as u64;
    let chunks = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Moments::new(m);
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let (g, f, flag) = sample(k)?;
                acc.push(&g, f, flag);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = chunks.iter().fold(Moments::new(m), |a, b| a.merge(b));
    Ok(total.finish())
}

/// Mean and variance of the estimator over `count` trajectories, without storing them.
pub fn gradient_stats<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    count: usize,
    seed: u64,
) -> Result<GradStats> {
    stream_stats(model.param_dim(), count, |k| {
        let e = sample_estimate(model, loss, theta, x0, seed, k)?;
        Ok((
            e.total().iter().map(|v| v.as_f64()).collect(),
            e.objective.as_f64(),
            e.flagged,
        ))
    })
}

/// Mean and variance of the objective alone over `count` trajectories.
pub fn objective_stats<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    count: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let s = stream_stats(0, count, |k| {
        let t = simulate(model, loss, theta, x0, derive_seed(seed, k))?;
        Ok((Vec::new(), t.objective.as_f64(), false))
    })?;
    Ok((s.mean_objective, s.objective_variance))
}

/// Objective and gradient of a model without score steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradient<S> {
    pub objective: S,
    pub gradient: Vec<S>,
    pub flagged: bool,
}

/// Classical adjoint gradient; rejects models with score steps.
pub fn deterministic_adjoint<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
) -> Result<AdjointGradient<S>> {
    if model.has_score() {
        return Err(Error::ScoreStepsPresent);
    }
    let traj = simulate(model, loss, theta, x0, 0)?;
    let est = reverse_pass(model, loss, theta, &traj)?;
    Ok(AdjointGradient {
        objective: est.objective,
        gradient: est.pathwise,
        flagged: est.flagged,
    })
}

/// Objective of a model without score steps.
pub fn deterministic_objective<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
) -> Result<S> {
    if model.has_score() {
        return Err(Error::ScoreStepsPresent);
    }
    Ok(simulate(model, loss, theta, x0, 0)?.objective)
}

/// Central differences, `2m` evaluations of `objective`.
pub fn finite_difference_gradient<S, F>(objective: F, theta: &[S], h: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&[S]) -> Result<S>,
{
    if !(h > S::zero()) {
        return Err(Error::invalid("h", "must be positive"));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        probe[k] = theta[k] + h;
        let up = objective(&probe)?;
        probe[k] = theta[k] - h;
        let down = objective(&probe)?;
        probe[k] = theta[k];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::non_finite("objective", None));
        }
        grad.push((up - down) / (h + h));
    }
    Ok(grad)
}

/// Objective of a stored trajectory replayed at `theta`.
pub fn replayed_objective<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    traj: &Trajectory<S>,
) -> Result<S> {
    Ok(replay(model, loss, theta, traj)?.objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepVjp;
    use approx::assert_relative_eq;

    /// `x_i = x_{i−1} + θ`.
    struct Chain(usize);

    impl StepModel<f64> for Chain {
        fn n_steps(&self) -> usize {
            self.0
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn has_score(&self) -> bool {
            false
        }
        fn has_pathwise(&self) -> bool {
            true
        }
        fn step(&self, ctx: &StepContext<'_, f64>, _: Option<&[f64]>, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![ctx.prev()[0] + ctx.theta[0]])
        }
        fn step_vjp(
            &self,
            _: &StepContext<'_, f64>,
            _: Option<&[f64]>,
            _: &[f64],
            cot: &[f64],
        ) -> Result<StepVjp<f64>> {
            Ok(StepVjp {
                d_theta: vec![cot[0]],
                d_window: vec![vec![cot[0]]],
                nondifferentiable: false,
            })
        }
    }

    fn final_square() -> LossSpec<f64> {
        LossSpec::general(
            |xs: &[Vec<f64>]| xs.last().unwrap()[0].powi(2),
            move |xs| {
                let mut g = vec![vec![0.0]; xs.len()];
                g[xs.len() - 1][0] = 2.0 * xs[xs.len() - 1][0];
                g
            },
        )
    }

    #[test]
    fn chain_gradient_is_eighteen() {
        let g = deterministic_adjoint(&Chain(3), &final_square(), &[1.0], &[0.0]).unwrap();
        assert_eq!(g.objective, 9.0);
        assert_eq!(g.gradient, vec![18.0]);
    }

    #[test]
    fn adjoints_are_constant_along_chain() {
        let mut w = AdjointWindow::<f64>::new(1, 1, 3);
        w.current_mut()[0] = 6.0;
        for i in (1..=3).rev() {
            assert_eq!(w.current()[0], 6.0);
            let c = w.current()[0];
            if i > 1 {
                w.at_mut(i - 1)[0] += c;
            }
            w.shift();
        }
    }

    #[test]
    fn loss_on_first_state_only() {
        let loss = LossSpec::general(
            |xs: &[Vec<f64>]| 3.0 * xs[0][0],
            |xs| {
                let mut g = vec![vec![0.0]; xs.len()];
                g[0][0] = 3.0;
                g
            },
        );
        let g = deterministic_adjoint(&Chain(4), &loss, &[0.5], &[0.0]).unwrap();
        assert_eq!(g.gradient, vec![3.0]);
    }

    #[test]
    fn finite_differences() {
        let g = finite_difference_gradient(|t: &[f64]| Ok(t[0] * t[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_difference_gradient(|t: &[f64]| Ok(t.iter().sum()), &[0.3, -1.0, 4.0], 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-10);
        }
        assert!(finite_difference_gradient(|_: &[f64]| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn batch_of_one_equals_single_sweep() {
        let loss = final_square();
        let b = estimate_gradient(&Chain(3), &loss, &[1.0], &[0.0], 1, 5).unwrap();
        assert_eq!(b.mean_gradient, b.samples[0].total());
        assert_relative_eq!(b.mean_gradient[0], 18.0);
        assert!(estimate_gradient(&Chain(3), &loss, &[1.0], &[0.0], 0, 5).is_err());
    }
}
