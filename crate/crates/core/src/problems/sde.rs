//! Euler–Maruyama discretizations of a linear SDE `dx = (Σ_l D_l x_{−l} + c) dt + A dW`
//! in three flavours: reparametrized noise, a Gaussian score density, and
//! categorical jumps in place of the diffusion.
//!
//! Parameter layout: `D_1 .. D_τ` (row-major `k×k` each), then `c`, then either
//! the packed lower triangle of `A` (diagonal as log) or the jump logits
//! (`k` rows of `l`).

use std::sync::Arc;

use rand::RngCore;

use crate::distributions::{categorical_sample, categorical_score, MvNormalCholesky};
use crate::error::{Error, Result};
use crate::model::{LogProb, LossSpec, StepContext, StepModel, StepVjp};
use crate::problems::Problem;
use crate::rng::{open_uniform, standard_normal};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdeVariant {
    Pathwise,
    Score,
    Jump,
}

impl SdeVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pathwise" => Some(Self::Pathwise),
            "score" => Some(Self::Score),
            "jump" => Some(Self::Jump),
            _ => None,
        }
    }
}

/// Shared linear drift `x + Δt (Σ_l D_l x_{i−l} + c)`.
#[derive(Debug, Clone, PartialEq)]
struct Drift {
    dim: usize,
    lag: usize,
    dt: f64,
}

impl Drift {
    fn n_params(&self) -> usize {
        self.lag * self.dim * self.dim + self.dim
    }

    fn mean<S: Scalar>(&self, ctx: &StepContext<'_, S>) -> Vec<S> {
        let k = self.dim;
        let dt = S::of(self.dt);
        let x = ctx.prev();
        let c = &ctx.theta[self.lag * k * k..self.n_params()];
        (0..k)
            .map(|r| {
                let mut b = c[r];
                for (slot, xs) in ctx.window.iter().enumerate() {
                    let l = self.lag - slot;
                    let d = &ctx.theta[(l - 1) * k * k..l * k * k];
                    for (j, &xj) in xs.iter().enumerate() {
                        b += d[r * k + j] * xj;
                    }
                }
                x[r] + dt * b
            })
            .collect()
    }

    /// Accumulates `vᵀ ∂mean/∂θ` into `d_theta` and returns `vᵀ ∂mean/∂window`.
    fn vjp<S: Scalar>(&self, ctx: &StepContext<'_, S>, v: &[S], d_theta: &mut [S]) -> Vec<Vec<S>> {
        let k = self.dim;
        let dt = S::of(self.dt);
        let mut d_window = vec![vec![S::zero(); k]; self.lag];
        for (slot, xs) in ctx.window.iter().enumerate() {
            let l = self.lag - slot;
            let off = (l - 1) * k * k;
            for r in 0..k {
                for j in 0..k {
                    d_theta[off + r * k + j] += v[r] * dt * xs[j];
                    d_window[slot][j] += dt * ctx.theta[off + r * k + j] * v[r];
                }
            }
        }
        let off = self.lag * k * k;
        for r in 0..k {
            d_theta[off + r] += v[r] * dt;
            d_window[self.lag - 1][r] += v[r];
        }
        d_window
    }
}

fn packed(r: usize, c: usize) -> usize {
    r * (r + 1) / 2 + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeProblem<S> {
    pub variant: SdeVariant,
    pub n_steps: usize,
    /// Jump sizes for the jump variant.
    pub jumps: Vec<S>,
    /// Target of the per-step loss `‖x_i − q‖²`.
    pub target: Vec<S>,
    drift: Drift,
}

impl<S: Scalar> SdeProblem<S> {
    pub fn new(variant: SdeVariant, dim: usize, n_steps: usize, dt: f64, lag: usize) -> Result<Self> {
        if dim == 0 || n_steps == 0 || lag == 0 {
            return Err(Error::invalid("sde", "dimension, steps and lag must be positive"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        Ok(Self {
            variant,
            n_steps,
            jumps: vec![-S::one(), S::zero(), S::one()],
            target: vec![S::zero(); dim],
            drift: Drift { dim, lag, dt },
        })
    }

    pub fn with_jumps(mut self, jumps: Vec<S>) -> Result<Self> {
        if jumps.is_empty() {
            return Err(Error::invalid("jumps", "need at least one jump size"));
        }
        self.jumps = jumps;
        Ok(self)
    }

    pub fn with_target(mut self, target: Vec<S>) -> Result<Self> {
        if target.len() != self.dim() {
            return Err(Error::dim("target", self.dim(), target.len()));
        }
        self.target = target;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.drift.dim
    }

    pub fn dt(&self) -> f64 {
        self.drift.dt
    }

    /// Offset of the block after the drift parameters.
    pub fn tail_offset(&self) -> usize {
        self.drift.n_params()
    }

    /// Packs drift matrices, offset and the noise block into θ.
    pub fn pack(&self, drift: &[S], offset: &[S], tail: &[S]) -> Result<Vec<S>> {
        let k = self.dim();
        let lk = self.drift.lag * k * k;
        if drift.len() != lk {
            return Err(Error::dim("drift matrices", lk, drift.len()));
        }
        if offset.len() != k {
            return Err(Error::dim("drift offset", k, offset.len()));
        }
        let want = self.param_dim() - self.tail_offset();
        if tail.len() != want {
            return Err(Error::dim("noise parameters", want, tail.len()));
        }
        if self.variant != SdeVariant::Jump {
            for r in 0..k {
                let d = tail[packed(r, r)].exp();
                if !(d > S::zero() && d.is_finite()) {
                    return Err(Error::invalid("noise", format!("diffusion factor is degenerate in row {r}")));
                }
            }
        }
        if !drift.iter().chain(offset).chain(tail).all(|v| v.is_finite()) {
            return Err(Error::non_finite("sde parameters", None));
        }
        Ok([drift, offset, tail].concat())
    }

    /// Full `k×k` Cholesky parameters (log diagonal) of `√Δt · A`.
    fn scaled_raw(&self, theta: &[S]) -> Vec<S> {
        let k = self.dim();
        let base = &theta[self.tail_offset()..];
        let sq = S::of(self.dt().sqrt());
        let half_log = S::of(0.5 * self.dt().ln());
        let mut raw = vec![S::zero(); k * k];
        for r in 0..k {
            for c in 0..r {
                raw[r * k + c] = sq * base[packed(r, c)];
            }
            raw[r * k + r] = base[packed(r, r)] + half_log;
        }
        raw
    }

    /// Lower-triangular `A` from the packed block.
    fn factor(&self, theta: &[S]) -> Vec<S> {
        let k = self.dim();
        let base = &theta[self.tail_offset()..];
        let mut a = vec![S::zero(); k * k];
        for r in 0..k {
            for c in 0..r {
                a[r * k + c] = base[packed(r, c)];
            }
            a[r * k + r] = base[packed(r, r)].exp();
        }
        a
    }

    fn jump_choice(&self, y: &[S]) -> Result<Vec<usize>> {
        if y.len() != self.dim() {
            return Err(Error::dim("jump draw", self.dim(), y.len()));
        }
        y.iter()
            .map(|v| {
                let j = v.as_f64();
                if j < 0.0 || j.fract() != 0.0 || j as usize >= self.jumps.len() {
                    Err(Error::OutcomeOutOfRange { outcome: j as usize, size: self.jumps.len() })
                } else {
                    Ok(j as usize)
                }
            })
            .collect()
    }

    fn logits<'a>(&self, theta: &'a [S], r: usize) -> &'a [S] {
        let l = self.jumps.len();
        let off = self.tail_offset() + r * l;
        &theta[off..off + l]
    }

    pub fn loss(&self) -> LossSpec<S> {
        let q = self.target.clone();
        let q2 = self.target.clone();
        LossSpec::summable(
            move |_, x: &[S]| x.iter().zip(&q).map(|(&a, &b)| (a - b) * (a - b)).sum(),
            move |_, x: &[S]| x.iter().zip(&q2).map(|(&a, &b)| S::of(2.0) * (a - b)).collect(),
        )
    }

    pub fn problem(&self, x0: Vec<S>, theta0: Vec<S>) -> Problem<S> {
        let name = match self.variant {
            SdeVariant::Pathwise => "sde_pathwise",
            SdeVariant::Score => "sde_score",
            SdeVariant::Jump => "sde_jump",
        };
        Problem::new(name, Arc::new(self.clone()), self.loss(), x0, theta0)
    }
}

impl<S: Scalar> StepModel<S> for SdeProblem<S> {
    fn n_steps(&self) -> usize {
        self.n_steps
    }
    fn lag(&self) -> usize {
        self.drift.lag
    }
    fn state_dim(&self) -> usize {
        self.dim()
    }
    fn param_dim(&self) -> usize {
        let k = self.dim();
        self.tail_offset()
            + match self.variant {
                SdeVariant::Jump => k * self.jumps.len(),
                _ => k * (k + 1) / 2,
            }
    }
    fn has_score(&self) -> bool {
        self.variant != SdeVariant::Pathwise
    }
    fn has_pathwise(&self) -> bool {
        self.variant != SdeVariant::Score
    }

    fn sample_noise(&self, _: &StepContext<'_, S>, rng: &mut dyn RngCore) -> Vec<S> {
        if self.variant != SdeVariant::Pathwise {
            return Vec::new();
        }
        let sd = S::of(self.dt().sqrt());
        (0..self.dim()).map(|_| sd * standard_normal::<S>(rng)).collect()
    }

    fn sample_draw(&self, ctx: &StepContext<'_, S>, _: &[S], rng: &mut dyn RngCore) -> Result<Option<Vec<S>>> {
        match self.variant {
            SdeVariant::Pathwise => Ok(None),
            SdeVariant::Score => {
                let dist = MvNormalCholesky::new(self.drift.mean(ctx), self.scaled_raw(ctx.theta))?;
                let z: Vec<S> = (0..self.dim()).map(|_| standard_normal::<S>(rng)).collect();
                Ok(Some(dist.transform(&z)))
            }
            SdeVariant::Jump => {
                let mut y = Vec::with_capacity(self.dim());
                for r in 0..self.dim() {
                    y.push(S::of(categorical_sample(self.logits(ctx.theta, r), open_uniform(rng))? as f64));
                }
                Ok(Some(y))
            }
        }
    }

    fn step(&self, ctx: &StepContext<'_, S>, draw: Option<&[S]>, noise: &[S]) -> Result<Vec<S>> {
        match self.variant {
            SdeVariant::Pathwise => {
                let k = self.dim();
                if noise.len() != k {
                    return Err(Error::dim("sde noise", k, noise.len()));
                }
                let a = self.factor(ctx.theta);
                let mut x = self.drift.mean(ctx);
                for r in 0..k {
                    for c in 0..=r {
                        x[r] += a[r * k + c] * noise[c];
                    }
                }
                Ok(x)
            }
            SdeVariant::Score => {
                let y = draw.ok_or(Error::MissingPartial("sde draw"))?;
                if y.len() != self.dim() {
                    return Err(Error::dim("sde draw", self.dim(), y.len()));
                }
                Ok(y.to_vec())
            }
            SdeVariant::Jump => {
                let ys = self.jump_choice(draw.ok_or(Error::MissingPartial("jump draw"))?)?;
                let mut x = self.drift.mean(ctx);
                for (xr, j) in x.iter_mut().zip(ys) {
                    *xr += self.jumps[j];
                }
                Ok(x)
            }
        }
    }

    fn log_prob(&self, ctx: &StepContext<'_, S>, draw: &[S], _: &[S]) -> Result<LogProb<S>> {
        let m = self.param_dim();
        match self.variant {
            SdeVariant::Pathwise => Err(Error::MissingPartial("log_prob")),
            SdeVariant::Score => {
                let k = self.dim();
                let dist = MvNormalCholesky::new(self.drift.mean(ctx), self.scaled_raw(ctx.theta))?;
                let lp = dist.logpdf(draw)?;
                let mut d_theta = vec![S::zero(); m];
                let d_window = self.drift.vjp(ctx, &lp.d_mean, &mut d_theta);
                let sq = S::of(self.dt().sqrt());
                let off = self.tail_offset();
                for r in 0..k {
                    for c in 0..r {
                        d_theta[off + packed(r, c)] = sq * lp.d_raw[r * k + c];
                    }
                    d_theta[off + packed(r, r)] = lp.d_raw[r * k + r];
                }
                Ok(LogProb {
                    value: lp.value,
                    d_theta,
                    d_window,
                })
            }
            SdeVariant::Jump => {
                let ys = self.jump_choice(draw)?;
                let l = self.jumps.len();
                let mut d_theta = vec![S::zero(); m];
                let mut value = S::zero();
                for (r, &j) in ys.iter().enumerate() {
                    let (v, g) = categorical_score(self.logits(ctx.theta, r), j)?;
                    value += v;
                    let off = self.tail_offset() + r * l;
                    d_theta[off..off + l].copy_from_slice(&g);
                }
                Ok(LogProb {
                    value,
                    d_theta,
                    d_window: Vec::new(),
                })
            }
        }
    }

    fn step_vjp(&self, ctx: &StepContext<'_, S>, _: Option<&[S]>, noise: &[S], cot: &[S]) -> Result<StepVjp<S>> {
        let m = self.param_dim();
        let mut d_theta = vec![S::zero(); m];
        let d_window = match self.variant {
            SdeVariant::Score => Vec::new(),
            SdeVariant::Jump => self.drift.vjp(ctx, cot, &mut d_theta),
            SdeVariant::Pathwise => {
                let k = self.dim();
                let w = self.drift.vjp(ctx, cot, &mut d_theta);
                let a = self.factor(ctx.theta);
                let off = self.tail_offset();
                for r in 0..k {
                    for c in 0..r {
                        d_theta[off + packed(r, c)] = cot[r] * noise[c];
                    }
                    d_theta[off + packed(r, r)] = cot[r] * noise[r] * a[r * k + r];
                }
                w
            }
        };
        Ok(StepVjp {
            d_theta,
            d_window,
            nondifferentiable: false,
        })
    }

    fn draw_support(&self, _: &StepContext<'_, S>, _: &[S]) -> Option<Vec<Vec<S>>> {
        if self.variant != SdeVariant::Jump {
            return None;
        }
        let l = self.jumps.len();
        let k = self.dim();
        let total = l.checked_pow(k as u32)?;
        Some(
            (0..total)
                .map(|mut idx| {
                    (0..k)
                        .map(|_| {
                            let j = idx % l;
                            idx /= l;
                            S::of(j as f64)
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

/// Deterministic drift `x_i = x_{i−1} + Δt (Σ_l D_l x_{i−l} + c) + shift`, with
/// θ holding only the drift block.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftOde<S> {
    pub n_steps: usize,
    pub shift: Vec<S>,
    drift: Drift,
}

impl<S: Scalar> DriftOde<S> {
    pub fn new(dim: usize, n_steps: usize, dt: f64, lag: usize, shift: Vec<S>) -> Result<Self> {
        if shift.len() != dim {
            return Err(Error::dim("shift", dim, shift.len()));
        }
        if dim == 0 || n_steps == 0 || lag == 0 || !(dt > 0.0) {
            return Err(Error::invalid("drift ode", "dimension, steps, lag and dt must be positive"));
        }
        Ok(Self {
            n_steps,
            shift,
            drift: Drift { dim, lag, dt },
        })
    }

    /// The deterministic counterpart of a one-jump [`SdeProblem`].
    pub fn from_single_jump(p: &SdeProblem<S>) -> Result<Self> {
        if p.variant != SdeVariant::Jump || p.jumps.len() != 1 {
            return Err(Error::invalid("variant", "expected a jump model with one jump size"));
        }
        Self::new(p.dim(), p.n_steps, p.dt(), p.drift.lag, vec![p.jumps[0]; p.dim()])
    }
}

impl<S: Scalar> StepModel<S> for DriftOde<S> {
    fn n_steps(&self) -> usize {
        self.n_steps
    }
    fn lag(&self) -> usize {
        self.drift.lag
    }
    fn state_dim(&self) -> usize {
        self.drift.dim
    }
    fn param_dim(&self) -> usize {
        self.drift.n_params()
    }
    fn has_score(&self) -> bool {
        false
    }
    fn has_pathwise(&self) -> bool {
        true
    }

    fn step(&self, ctx: &StepContext<'_, S>, _: Option<&[S]>, _: &[S]) -> Result<Vec<S>> {
        let mut x = self.drift.mean(ctx);
        for (xr, &s) in x.iter_mut().zip(&self.shift) {
            *xr += s;
        }
        Ok(x)
    }

    fn step_vjp(&self, ctx: &StepContext<'_, S>, _: Option<&[S]>, _: &[S], cot: &[S]) -> Result<StepVjp<S>> {
        let mut d_theta = vec![S::zero(); self.param_dim()];
        let d_window = self.drift.vjp(ctx, cot, &mut d_theta);
        Ok(StepVjp {
            d_theta,
            d_window,
            nondifferentiable: false,
        })
    }
}
