//! Ground truth: exhaustive enumeration of finite-support models, exact
//! optimal baselines, common-random-number finite differences and a
//! two-sample z-test for unbiasedness.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{apply_baseline, exact_variance, Beta, BetaLookup, BetaSource, Key, KeyExtractor, PartialPath};
use crate::error::{Error, Result};
use crate::estimator::{gradient_stats, objective_stats, reverse_pass_with, stream_stats, GradEstimate, GradStats, Weighting};
use crate::model::{window_of, LossSpec, StepContext, StepModel, Trajectory};
use crate::rng::derive_seed;
use crate::scalar::{axpy, dot, Scalar};

/// Maximum number of enumerated paths.
pub const PATH_CAP: usize = 1_000_000;

/// One path of a finite-support model.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord<S> {
    pub probability: S,
    pub trajectory: Trajectory<S>,
    pub estimate: GradEstimate<S>,
}

impl<S: Scalar> PathRecord<S> {
    pub fn draws(&self) -> Vec<&[S]> {
        self.trajectory.draws.iter().filter_map(|d| d.as_deref()).collect()
    }
}

/// Exact expectations over every path.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationReport<S> {
    pub paths: Vec<PathRecord<S>>,
    pub expected_objective: S,
    pub expected_gradient: Vec<S>,
    pub variance: S,
}

/// Exact moments of a baselined estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinedMoments<S> {
    pub totals: Vec<Vec<S>>,
    pub mean: Vec<S>,
    pub variance: S,
}

impl<S: Scalar> EnumerationReport<S> {
    pub fn probability_mass(&self) -> S {
        self.paths.iter().map(|p| p.probability).sum()
    }

    /// Exact mean and variance after applying `source` to every path.
    pub fn baselined(&self, source: &dyn BetaSource<S>, keys: &dyn KeyExtractor<S>) -> Result<BaselinedMoments<S>> {
        let totals = self
            .paths
            .iter()
            .map(|p| Ok(apply_baseline(&p.estimate, source, keys, &p.trajectory)?.total))
            .collect::<Result<Vec<_>>>()?;
        let dist: Vec<(S, Vec<S>)> = self
            .paths
            .iter()
            .zip(&totals)
            .map(|(p, g)| (p.probability, g.clone()))
            .collect();
        let mut mean = vec![S::zero(); self.expected_gradient.len()];
        for (p, g) in &dist {
            axpy(*p, g, &mut mean);
        }
        Ok(BaselinedMoments {
            variance: exact_variance(&dist),
            totals,
            mean,
        })
    }
}

fn no_noise<S: Scalar>(model: &dyn StepModel<S>, ctx: &StepContext<'_, S>, rng: &mut ChaCha8Rng) -> Result<Vec<S>> {
    let z = model.sample_noise(ctx, rng);
    if z.is_empty() {
        Ok(z)
    } else {
        Err(Error::NotEnumerable(ctx.step))
    }
}

struct Walker<'a, S: Scalar> {
    model: &'a dyn StepModel<S>,
    loss: &'a LossSpec<S>,
    theta: &'a [S],
    weighting: Weighting,
    rng: ChaCha8Rng,
    out: Vec<PathRecord<S>>,
}

impl<S: Scalar> Walker<'_, S> {
    fn walk(
        &mut self,
        states: &mut Vec<Vec<S>>,
        draws: &mut Vec<Option<Vec<S>>>,
        log_probs: &mut Vec<Option<S>>,
        log_p: S,
    ) -> Result<()> {
        let n = self.model.n_steps();
        let i = states.len();
        if i > n {
            if self.out.len() >= PATH_CAP {
                return Err(Error::SupportTooLarge {
                    paths: self.out.len() + 1,
                    cap: PATH_CAP,
                });
            }
            let (objective, step_losses) = self.loss.evaluate(states);
            let trajectory = Trajectory {
                states: states.clone(),
                noises: vec![Vec::new(); n],
                draws: draws.clone(),
                log_probs: log_probs.clone(),
                step_losses,
                objective,
            };
            let estimate = reverse_pass_with(self.model, self.loss, self.theta, &trajectory, self.weighting)?;
            self.out.push(PathRecord {
                probability: log_p.exp(),
                trajectory,
                estimate,
            });
            return Ok(());
        }
        let lag = self.model.lag();
        let (support, noise) = {
            let window = window_of(states, i, lag);
            let ctx = StepContext {
                step: i,
                window: &window,
                theta: self.theta,
            };
            let noise = no_noise(self.model, &ctx, &mut self.rng)?;
            let support = match self.model.draw_support(&ctx, &noise) {
                Some(s) => Some(s),
                None => match self.model.sample_draw(&ctx, &noise, &mut self.rng)? {
                    None => None,
                    Some(_) => return Err(Error::NotEnumerable(i)),
                },
            };
            (support, noise)
        };
        match support {
            None => {
                let x = {
                    let window = window_of(states, i, lag);
                    let ctx = StepContext { step: i, window: &window, theta: self.theta };
                    self.model.step(&ctx, None, &noise)?
                };
                states.push(x);
                draws.push(None);
                log_probs.push(None);
                self.walk(states, draws, log_probs, log_p)?;
            }
            Some(support) => {
                for y in support {
                    let (lp, x) = {
                        let window = window_of(states, i, lag);
                        let ctx = StepContext { step: i, window: &window, theta: self.theta };
                        let lp = self.model.log_prob(&ctx, &y, &noise)?.value;
                        (lp, self.model.step(&ctx, Some(&y), &noise)?)
                    };
                    if lp == S::neg_infinity() {
                        continue;
                    }
                    states.push(x);
                    draws.push(Some(y));
                    log_probs.push(Some(lp));
                    self.walk(states, draws, log_probs, log_p + lp)?;
                    states.pop();
                    draws.pop();
                    log_probs.pop();
                }
                return Ok(());
            }
        }
        states.pop();
        draws.pop();
        log_probs.pop();
        Ok(())
    }
}

/// Enumerates every path of a model whose draws all have finite support.
pub fn enumerate<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
) -> Result<EnumerationReport<S>> {
    enumerate_with(model, loss, theta, x0, Weighting::Auto)
}

pub fn enumerate_with<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    weighting: Weighting,
) -> Result<EnumerationReport<S>> {
    if theta.len() != model.param_dim() {
        return Err(Error::dim("theta", model.param_dim(), theta.len()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::dim("x0", model.state_dim(), x0.len()));
    }
    let mut w = Walker {
        model,
        loss,
        theta,
        weighting,
        rng: ChaCha8Rng::seed_from_u64(0),
        out: Vec::new(),
    };
    let mut states = vec![x0.to_vec()];
    w.walk(&mut states, &mut Vec::new(), &mut Vec::new(), S::zero())?;
    let paths = w.out;
    let m = model.param_dim();
    let mut expected_gradient = vec![S::zero(); m];
    let mut expected_objective = S::zero();
    let mut dist = Vec::with_capacity(paths.len());
    for p in &paths {
        let g = p.estimate.total();
        axpy(p.probability, &g, &mut expected_gradient);
        expected_objective += p.probability * p.trajectory.objective;
        dist.push((p.probability, g));
    }
    Ok(EnumerationReport {
        variance: exact_variance(&dist),
        paths,
        expected_objective,
        expected_gradient,
    })
}

/// Exact baseline values per table key.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTable<S> {
    pub entries: BTreeMap<usize, Beta<S>>,
    /// Keys whose denominator vanished (β set to 0).
    pub floored: BTreeSet<usize>,
}

impl<S: Scalar> BetaTable<S> {
    pub fn scalar(&self, key: usize) -> Option<S> {
        match self.entries.get(&key)? {
            Beta::Scalar(b) => Some(*b),
            Beta::PerParameter(_) => None,
        }
    }

    pub fn per_parameter(&self, key: usize) -> Option<&[S]> {
        match self.entries.get(&key)? {
            Beta::PerParameter(b) => Some(b),
            Beta::Scalar(_) => None,
        }
    }

    /// Copy with one scalar entry shifted by `delta`.
    pub fn perturbed(&self, key: usize, component: usize, delta: S) -> Self {
        let mut t = self.clone();
        match t.entries.get_mut(&key) {
            Some(Beta::Scalar(b)) => *b += delta,
            Some(Beta::PerParameter(b)) => b[component] += delta,
            None => {}
        }
        t
    }
}

impl<S: Scalar> BetaSource<S> for BetaTable<S> {
    fn beta(&self, _step: usize, key: &Key<S>) -> Result<BetaLookup<S>> {
        let Key::Discrete(k) = key else {
            return Err(Error::BaselineKind {
                expected: "discrete key",
                found: "feature key",
            });
        };
        Ok(match self.entries.get(k) {
            Some(b) => BetaLookup {
                beta: b.clone(),
                cold: false,
                floored: self.floored.contains(k),
            },
            None => BetaLookup {
                beta: Beta::Scalar(S::zero()),
                cold: true,
                floored: false,
            },
        })
    }
}

/// Oracle baselines for every key of a tabular extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalBaselines<S> {
    /// `β*(k) = E[Σ_j ĝ_sf·s_j 1{ξ_j=k}] / E[Σ_j s_j·s_j 1{ξ_j=k}]`.
    pub scalar: BetaTable<S>,
    /// Componentwise version of `scalar`.
    pub per_parameter: BetaTable<S>,
    /// Value-function targets `E[W_j | ξ_j = k]`.
    pub value: BetaTable<S>,
    /// `E[Q_j ‖s_j‖² 1{ξ_j=k}] / E[‖s_j‖² 1{ξ_j=k}]` with `Q_j = E[W_j | y_1..y_j]`.
    pub q_function: BetaTable<S>,
}

fn ratio_table<S: Scalar>(num: BTreeMap<usize, Vec<S>>, den: &BTreeMap<usize, Vec<S>>, floor: S, per_parameter: bool) -> BetaTable<S> {
    let mut entries = BTreeMap::new();
    let mut floored = BTreeSet::new();
    for (k, top) in num {
        let bottom = &den[&k];
        let vals: Vec<S> = top
            .iter()
            .zip(bottom)
            .map(|(&t, &b)| {
                if b.abs() < floor {
                    floored.insert(k);
                    S::zero()
                } else {
                    t / b
                }
            })
            .collect();
        entries.insert(k, if per_parameter { Beta::PerParameter(vals) } else { Beta::Scalar(vals[0]) });
    }
    BetaTable { entries, floored }
}

/// Exact optimal (and comparison) baselines from an enumeration.
pub fn exact_optimal_baselines<S: Scalar>(
    report: &EnumerationReport<S>,
    keys: &dyn KeyExtractor<S>,
) -> Result<OptimalBaselines<S>> {
    let m = report.expected_gradient.len();
    let floor = S::of(crate::baselines::DEFAULT_FLOOR);
    let mut s_num: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut s_den: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut p_num: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut p_den: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut v_num: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut v_den: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut q_num: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    let mut q_den: BTreeMap<usize, Vec<S>> = BTreeMap::new();

    // Q_j = E[W_j | y_1..y_j]: group paths by their draw prefix through step j.
    let mut prefix_mass: BTreeMap<(usize, Vec<u64>), (S, S)> = BTreeMap::new();
    let prefix = |t: &Trajectory<S>, j: usize| -> Vec<u64> {
        t.draws[..j]
            .iter()
            .flat_map(|d| d.iter().flatten().map(|v| v.as_f64().to_bits()))
            .collect()
    };
    for p in &report.paths {
        for term in &p.estimate.score_terms {
            let e = prefix_mass
                .entry((term.step, prefix(&p.trajectory, term.step)))
                .or_insert((S::zero(), S::zero()));
            e.0 += p.probability * term.weight;
            e.1 += p.probability;
        }
    }

    let add = |map: &mut BTreeMap<usize, Vec<S>>, k: usize, v: &[S]| {
        let e = map.entry(k).or_insert_with(|| vec![S::zero(); v.len()]);
        for (a, b) in e.iter_mut().zip(v) {
            *a += *b;
        }
    };
    for p in &report.paths {
        let g_sf = p.estimate.score_sum();
        let pr = p.probability;
        for term in &p.estimate.score_terms {
            let Key::Discrete(k) = keys.key(&PartialPath::of(&p.trajectory, term.step)) else {
                return Err(Error::BaselineKind {
                    expected: "discrete key",
                    found: "feature key",
                });
            };
            let s = &term.score;
            let ss = dot(s, s);
            add(&mut s_num, k, &[pr * dot(&g_sf, s)]);
            add(&mut s_den, k, &[pr * ss]);
            let pn: Vec<S> = (0..m).map(|l| pr * g_sf[l] * s[l]).collect();
            let pd: Vec<S> = (0..m).map(|l| pr * s[l] * s[l]).collect();
            add(&mut p_num, k, &pn);
            add(&mut p_den, k, &pd);
            add(&mut v_num, k, &[pr * term.weight]);
            add(&mut v_den, k, &[pr]);
            let (qw, qp) = prefix_mass[&(term.step, prefix(&p.trajectory, term.step))];
            add(&mut q_num, k, &[pr * (qw / qp) * ss]);
            add(&mut q_den, k, &[pr * ss]);
        }
    }
    Ok(OptimalBaselines {
        scalar: ratio_table(s_num, &s_den, floor, false),
        per_parameter: ratio_table(p_num, &p_den, floor, true),
        value: ratio_table(v_num, &v_den, floor, false),
        q_function: ratio_table(q_num, &q_den, floor, false),
    })
}

/// Result of comparing the mean adjoint gradient against CRN finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnReport {
    pub mean_gradient: Vec<f64>,
    pub fd_gradient: Vec<f64>,
    /// `max_k |ĝ_k − fd_k| / ‖fd‖∞`.
    pub max_relative_gap: f64,
}

/// Relative gap `max_k |a_k − b_k| / max(‖b‖∞, tiny)`.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |g, (x, y)| g.max((x - y).abs())) / scale
}

/// Mean adjoint gradient vs central differences of the mean objective, with
/// the same `n` seeds reused at every perturbed θ.
#[allow(clippy::too_many_arguments)]
pub fn crn_fd_check<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    h: S,
    n: usize,
    seed: u64,
) -> Result<CrnReport> {
    if model.has_score() {
        return Err(Error::ScoreStepsPresent);
    }
    if !(h > S::zero()) {
        return Err(Error::invalid("h", "must be positive"));
    }
    let stats = gradient_stats(model, loss, theta, x0, n.max(2), seed)?;
    let fd = crate::estimator::finite_difference_gradient(
        |t: &[S]| Ok(S::of(objective_stats(model, loss, t, x0, n.max(2), seed)?.0)),
        theta,
        h,
    )?;
    let fd: Vec<f64> = fd.iter().map(|v| v.as_f64()).collect();
    Ok(CrnReport {
        max_relative_gap: relative_gap(&stats.mean, &fd),
        mean_gradient: stats.mean,
        fd_gradient: fd,
    })
}

/// Per-coordinate z-scores of mean ĝ against independently sampled finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    pub mean_gradient: Vec<f64>,
    pub gradient_se: Vec<f64>,
    pub fd_gradient: Vec<f64>,
    pub fd_se: Vec<f64>,
    pub z: Vec<f64>,
    pub flagged: usize,
    pub pass: bool,
}

pub const MIN_Z_SAMPLES: usize = 1000;
pub const Z_GATE: f64 = 4.0;

/// Two-sample z-test with caller-supplied samplers.
///
/// `gradient(k)` returns sample `k` of the estimator (and whether it was
/// flagged); `objective(theta, stream, k)` returns sample `k` of the
/// objective at `theta` from an independent `stream`.
pub fn unbiasedness_test_with<G, F>(theta: &[f64], n: usize, h: f64, gradient: G, objective: F) -> Result<UnbiasednessReport>
where
    G: Fn(u64) -> Result<(Vec<f64>, bool)> + Sync,
    F: Fn(&[f64], u64, u64) -> Result<f64> + Sync,
{
    if n < MIN_Z_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: n,
            min: MIN_Z_SAMPLES,
        });
    }
    if !(h > 0.0) {
        return Err(Error::invalid("h", "must be positive"));
    }
    let m = theta.len();
    let g: GradStats = stream_stats(m, n, |k| {
        let (v, flag) = gradient(k)?;
        Ok((v, 0.0, flag))
    })?;
    let mut fd = Vec::with_capacity(m);
    let mut fd_se = Vec::with_capacity(m);
    for k in 0..m {
        let side = |sign: f64, stream: u64| -> Result<(f64, f64)> {
            let mut t = theta.to_vec();
            t[k] += sign * h;
            let s = stream_stats(0, n, |i| Ok((Vec::new(), objective(&t, stream, i)?, false)))?;
            Ok((s.mean_objective, s.objective_variance))
        };
        let (up, vu) = side(1.0, 2 * k as u64 + 1)?;
        let (down, vd) = side(-1.0, 2 * k as u64 + 2)?;
        fd.push((up - down) / (2.0 * h));
        fd_se.push(((vu + vd) / n as f64).sqrt() / (2.0 * h));
    }
    let gse = g.std_error();
    let z: Vec<f64> = (0..m)
        .map(|k| {
            let se = (gse[k].powi(2) + fd_se[k].powi(2)).sqrt();
            if se == 0.0 {
                if (g.mean[k] - fd[k]).abs() < 1e-12 { 0.0 } else { f64::INFINITY }
            } else {
                (g.mean[k] - fd[k]) / se
            }
        })
        .collect();
    let pass = z.iter().all(|v| v.abs() < Z_GATE);
    Ok(UnbiasednessReport {
        mean_gradient: g.mean,
        gradient_se: gse,
        fd_gradient: fd,
        fd_se,
        z,
        flagged: g.flagged,
        pass,
    })
}

/// z-test of the adjoint estimator of `model` at `theta`.
#[allow(clippy::too_many_arguments)]
pub fn statistical_unbiasedness_test<S: Scalar>(
    model: &dyn StepModel<S>,
    loss: &LossSpec<S>,
    theta: &[S],
    x0: &[S],
    n: usize,
    h: S,
    seed: u64,
) -> Result<UnbiasednessReport> {
    let th: Vec<f64> = theta.iter().map(|v| v.as_f64()).collect();
    unbiasedness_test_with(
        &th,
        n,
        h.as_f64(),
        |k| {
            let e = crate::estimator::sample_estimate(model, loss, theta, x0, seed, k)?;
            Ok((e.total().iter().map(|v| v.as_f64()).collect(), e.flagged))
        },
        |t, stream, i| {
            let ts: Vec<S> = t.iter().map(|&v| S::of(v)).collect();
            let traj = crate::model::simulate(model, loss, &ts, x0, derive_seed(derive_seed(seed, stream), i))?;
            Ok(traj.objective.as_f64())
        },
    )
}
