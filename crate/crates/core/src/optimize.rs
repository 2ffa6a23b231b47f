//! Stochastic gradient descent with co-trained baselines, and a projected
//! gradient-descent calibrator for deterministic problems.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    compute_returns, Beta, BaselineKind, BaselineState, BetaSource, PartialPath, ReturnMode, ReturnSpec, UpdateMode,
};
use crate::error::{Error, Result};
use crate::estimator::{deterministic_adjoint, deterministic_objective, reverse_pass, GradEstimate};
use crate::model::{simulate, Trajectory};
use crate::oracle::enumerate;
use crate::problems::Problem;
use crate::rng::derive_seed;
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub iterations: usize,
    pub batch: usize,
    pub baseline: BaselineKind,
    /// Use linear heads on the problem's feature keys instead of tables.
    pub linear_baseline: bool,
    pub baseline_update: UpdateMode,
    pub returns: ReturnSpec<f64>,
    pub seed: u64,
    pub replications: usize,
    /// Record the exact single-sample variance each iteration (finite-support problems only).
    pub track_exact_variance: bool,
    /// Train only the baseline; θ stays at its start.
    pub freeze_theta: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_theta: 0.01,
            lr_phi: 0.01,
            iterations: 10_000,
            batch: 1,
            baseline: BaselineKind::None,
            linear_baseline: false,
            baseline_update: UpdateMode::Sgd,
            returns: ReturnSpec::default(),
            seed: 0,
            replications: 1,
            track_exact_variance: false,
            freeze_theta: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_theta > 0.0 && self.lr_theta.is_finite()) {
            return Err(Error::invalid("lr_theta", "must be positive"));
        }
        if !(self.lr_phi > 0.0 && self.lr_phi.is_finite()) {
            return Err(Error::invalid("lr_phi", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be at least 1"));
        }
        self.returns.validate()
    }

    fn baseline_state<S: Scalar>(&self, m: usize) -> Result<BaselineState<S>> {
        let lr = S::of(self.lr_phi);
        let st = match (self.baseline, self.linear_baseline) {
            (BaselineKind::None, _) => BaselineState::none(m),
            (kind, false) => BaselineState::tabular(kind, m, lr)?,
            (kind, true) => BaselineState::linear(kind, m, lr)?,
        };
        Ok(st.with_mode(self.baseline_update))
    }
}

/// State of one iteration, recorded before θ moves.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: Vec<f64>,
    /// Batch mean of the sampled objective.
    pub objective: f64,
    /// Batch mean of the baselined gradient.
    pub gradient: Vec<f64>,
    /// β per table key (flattened for per-parameter baselines).
    pub baseline: Vec<f64>,
    pub exact_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub replication: usize,
    pub records: Vec<IterationRecord>,
    pub final_theta: Vec<f64>,
    /// Set when the run stopped early on a non-finite value.
    pub aborted: Option<String>,
}

impl RunHistory {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }
}

fn baseline_snapshot<S: Scalar>(state: &BaselineState<S>, n_keys: Option<usize>) -> Result<Vec<f64>> {
    let Some(c) = n_keys else {
        return Ok(Vec::new());
    };
    if state.kind() == BaselineKind::None {
        return Ok(vec![0.0; c]);
    }
    let mut out = Vec::with_capacity(c);
    for k in 0..c {
        match state.beta_at(k) {
            Ok(look) => match look.beta {
                Beta::Scalar(b) => out.push(b.as_f64()),
                Beta::PerParameter(b) => out.extend(b.iter().map(|v| v.as_f64())),
            },
            // linear heads cannot be read at a table key
            Err(Error::InvalidParameter { .. } | Error::BaselineKind { .. }) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Replaces score weights by the configured returns; yields the per-step targets.
fn reweight<S: Scalar>(
    problem: &Problem<S>,
    spec: &ReturnSpec<S>,
    state: &BaselineState<S>,
    est: &mut GradEstimate<S>,
    traj: &Trajectory<S>,
) -> Result<Option<Vec<S>>> {
    if spec.mode == ReturnMode::Raw {
        return Ok(None);
    }
    let losses = est.step_losses.as_ref().ok_or(Error::NotSummable)?;
    let values = if spec.needs_values() {
        if state.kind() != BaselineKind::Value {
            return Err(Error::MissingValues("bootstrapped returns need a value baseline"));
        }
        let mut v = Vec::with_capacity(traj.n_steps());
        for i in 1..=traj.n_steps() {
            let key = problem.keys.key(&PartialPath::of(traj, i));
            match state.beta(i, &key)?.beta {
                Beta::Scalar(b) => v.push(b),
                Beta::PerParameter(_) => return Err(Error::MissingValues("value baseline must be scalar")),
            }
        }
        Some(v)
    } else {
        None
    };
    let w = compute_returns(losses, values.as_deref(), spec)?;
    for t in &mut est.score_terms {
        t.weight = w[t.step - 1];
    }
    Ok(Some(w))
}

/// One SGD run: `θ ← Π(θ − sense·α_θ·ĝ)` with the baseline updated after every sample.
pub fn sgd_run<S: Scalar>(problem: &Problem<S>, cfg: &SgdConfig, replication: usize) -> Result<RunHistory> {
    cfg.validate()?;
    let model = problem.model.as_ref();
    let m = model.param_dim();
    if problem.theta0.len() != m {
        return Err(Error::dim("theta0", m, problem.theta0.len()));
    }
    let spec = ReturnSpec {
        gamma: S::of(cfg.returns.gamma),
        kappa: S::of(cfg.returns.kappa),
        mode: cfg.returns.mode,
    };
    let mut state = cfg.baseline_state::<S>(m)?;
    let n_keys = problem.keys.n_keys();
    let rep_seed = derive_seed(cfg.seed, replication as u64);
    let lr = S::of(cfg.lr_theta) * problem.sense.sign::<S>();
    let inv_b = S::one() / S::of(cfg.batch as f64);

    let mut theta = problem.theta0.clone();
    let mut records = Vec::with_capacity(cfg.iterations);
    let to_f64 = |v: &[S]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();

    for it in 0..cfg.iterations {
        let exact_variance = if cfg.track_exact_variance {
            let rep = enumerate(model, &problem.loss, &theta, &problem.x0)?;
            Some(rep.baselined(&state, problem.keys.as_ref())?.variance.as_f64())
        } else {
            None
        };
        let baseline = baseline_snapshot(&state, n_keys)?;

        let mut samples = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let seed = derive_seed(rep_seed, (it * cfg.batch + b) as u64);
            let traj = simulate(model, &problem.loss, &theta, &problem.x0, seed)?;
            let mut est = reverse_pass(model, &problem.loss, &theta, &traj)?;
            let targets = reweight(problem, &spec, &state, &mut est, &traj)?;
            samples.push((traj, est, targets));
        }
        // every sample of the batch sees the same φ
        let mut grad = vec![S::zero(); m];
        let mut objective = S::zero();
        for (traj, est, _) in &samples {
            let g = state.apply(est, traj, problem.keys.as_ref())?.total;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += *v * inv_b;
            }
            objective += est.objective * inv_b;
        }
        for (traj, est, targets) in &samples {
            state.update(est, traj, problem.keys.as_ref(), targets.as_deref())?;
        }

        records.push(IterationRecord {
            iteration: it,
            theta: to_f64(&theta),
            objective: objective.as_f64(),
            gradient: to_f64(&grad),
            baseline,
            exact_variance,
        });

        if !all_finite(&grad) {
            return Ok(RunHistory {
                replication,
                records,
                final_theta: to_f64(&theta),
                aborted: Some(format!("non-finite gradient at iteration {it}")),
            });
        }
        if !cfg.freeze_theta {
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= lr * *g;
            }
        }
        problem.project(&mut theta);
        if !all_finite(&theta) {
            return Ok(RunHistory {
                replication,
                records,
                final_theta: to_f64(&theta),
                aborted: Some(format!("non-finite theta after iteration {it}")),
            });
        }
    }
    Ok(RunHistory {
        replication,
        records,
        final_theta: to_f64(&theta),
        aborted: None,
    })
}

/// `cfg.replications` independent runs, in parallel, ordered by replication.
pub fn sgd_replications<S: Scalar>(problem: &Problem<S>, cfg: &SgdConfig) -> Result<Vec<RunHistory>> {
    cfg.validate()?;
    (0..cfg.replications)
        .into_par_iter()
        .map(|r| sgd_run(problem, cfg, r))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub max_iterations: usize,
    pub armijo: f64,
    pub shrink: f64,
    pub tolerance: f64,
    pub max_backtracks: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            armijo: 1e-4,
            shrink: 0.5,
            tolerance: 1e-8,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    /// Norm of the projected gradient step in normalized coordinates.
    pub projected_gradient: f64,
    pub converged: bool,
    /// The line search gave up; `theta` is the best point seen.
    pub line_search_failed: bool,
    /// Loss after each accepted step, starting with the initial loss.
    pub losses: Vec<f64>,
}

/// Accepted steps without any decrease before the calibrator gives up.
const STAGNATION: usize = 25;

/// Projected gradient descent with Armijo backtracking, run in coordinates
/// scaled so that every box side has unit length.
pub fn gd_calibrate<S: Scalar>(problem: &Problem<S>, theta0: &[S], cfg: &CalibrateConfig) -> Result<Calibration> {
    let model = problem.model.as_ref();
    if model.has_score() {
        return Err(Error::ScoreStepsPresent);
    }
    let m = model.param_dim();
    if theta0.len() != m {
        return Err(Error::dim("theta0", m, theta0.len()));
    }
    let (lo, hi): (Vec<f64>, Vec<f64>) = problem.bounds.iter().map(|&(a, b)| (a.as_f64(), b.as_f64())).unzip();
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) || lo.iter().zip(&hi).any(|(a, b)| a > b) {
        return Err(Error::invalid("bounds", "must be finite with lower ≤ upper"));
    }
    if !(cfg.armijo > 0.0 && cfg.armijo < 1.0 && cfg.shrink > 0.0 && cfg.shrink < 1.0) {
        return Err(Error::invalid("line search", "armijo and shrink must lie in (0, 1)"));
    }
    let width: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(f64::MIN_POSITIVE)).collect();
    let to_theta = |u: &[f64]| -> Vec<S> { (0..m).map(|k| S::of(lo[k] + width[k] * u[k])).collect() };
    let project = |u: &mut [f64]| u.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let eval = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let g = deterministic_adjoint(model, &problem.loss, &to_theta(u), &problem.x0)?;
        let grad = g.gradient.iter().zip(&width).map(|(d, w)| d.as_f64() * w).collect();
        Ok((g.objective.as_f64(), grad))
    };
    let objective = |u: &[f64]| -> Result<f64> {
        match deterministic_objective(model, &problem.loss, &to_theta(u), &problem.x0) {
            Ok(v) if v.is_finite() => Ok(v.as_f64()),
            Ok(_) | Err(Error::NonFinite { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };

    let mut u: Vec<f64> = (0..m).map(|k| ((theta0[k].as_f64() - lo[k]) / width[k]).clamp(0.0, 1.0)).collect();
    let (mut f, mut g) = eval(&u)?;
    if !f.is_finite() {
        return Err(Error::non_finite("initial loss", None));
    }
    let mut losses = vec![f];
    let mut step = 1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let pg_norm = |u: &[f64], g: &[f64]| {
        let mut t: Vec<f64> = u.iter().zip(g).map(|(a, b)| a - b).collect();
        project(&mut t);
        t.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut pg = pg_norm(&u, &g);
    let mut iterations = 0;
    let mut failed = false;
    let mut flat = 0;
    while iterations < cfg.max_iterations && pg >= cfg.tolerance && flat < STAGNATION {
        iterations += 1;
        let mut accepted = None;
        let mut t = step;
        for _ in 0..cfg.max_backtracks {
            let mut cand: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            project(&mut cand);
            let decrease: f64 = g.iter().zip(cand.iter().zip(&u)).map(|(gk, (c, a))| gk * (c - a)).sum();
            let fc = objective(&cand)?;
            if fc <= f + cfg.armijo * decrease {
                accepted = Some((cand, t));
                break;
            }
            t *= cfg.shrink;
        }
        let Some((cand, t)) = accepted else {
            failed = true;
            break;
        };
        u = cand;
        let before = f;
        (f, g) = eval(&u)?;
        // the loss no longer resolves any decrease
        flat = if f < before { 0 } else { flat + 1 };
        losses.push(f);
        pg = pg_norm(&u, &g);
        step = t * 2.0;
    }
    Ok(Calibration {
        theta: to_theta(&u).iter().map(|v| v.as_f64()).collect(),
        loss: f,
        iterations,
        projected_gradient: pg,
        converged: pg < cfg.tolerance,
        line_search_failed: failed,
        losses,
    })
}
