//! Control variates for the score part of the estimator.
//!
//! A baseline `β_i(ξ_i)` replaces each score weight `W_i` by `W_i − β_i`.
//! The conditioning key `ξ_i` is computed from a [`PartialPath`], which only
//! exposes the draws and states strictly before step `i`, so every key is
//! admissible by construction.

mod returns;
mod variance;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use returns::{compute_returns, ReturnMode, ReturnSpec};
pub use variance::{exact_variance, sample_variance, VarianceEstimate};

use crate::error::{Error, Result};
use crate::estimator::GradEstimate;
use crate::model::Trajectory;
use crate::scalar::{axpy, dot, Scalar};

/// Denominator floor for ratio baselines.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// What a baseline may see at step `i`: `y_1..y_{i−1}`, `x_0..x_{i−1}` and all noises.
#[derive(Debug, Clone, Copy)]
pub struct PartialPath<'a, S> {
    pub step: usize,
    pub draws: &'a [Option<Vec<S>>],
    pub states: &'a [Vec<S>],
    pub noises: &'a [Vec<S>],
}

impl<'a, S> PartialPath<'a, S> {
    /// Prefix of `traj` visible at 1-based `step`.
    pub fn of(traj: &'a Trajectory<S>, step: usize) -> Self {
        Self {
            step,
            draws: &traj.draws[..step - 1],
            states: &traj.states[..step],
            noises: &traj.noises,
        }
    }
}

/// Conditioning key: a table index or a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Key<S> {
    Discrete(usize),
    Features(Vec<S>),
}

/// Maps a partial path to its conditioning key `ξ_i`.
pub trait KeyExtractor<S: Scalar>: Send + Sync {
    fn key(&self, path: &PartialPath<'_, S>) -> Key<S>;

    /// Number of table keys, for tabular extractors.
    fn n_keys(&self) -> Option<usize> {
        None
    }
}

/// The same key at every step (`c = 1`).
#[derive(Debug, Clone, Copy, Default)]
pub struct SingleKey;

impl<S: Scalar> KeyExtractor<S> for SingleKey {
    fn key(&self, _: &PartialPath<'_, S>) -> Key<S> {
        Key::Discrete(0)
    }
    fn n_keys(&self) -> Option<usize> {
        Some(1)
    }
}

/// One key per step index.
#[derive(Debug, Clone, Copy)]
pub struct StepKey(pub usize);

impl<S: Scalar> KeyExtractor<S> for StepKey {
    fn key(&self, path: &PartialPath<'_, S>) -> Key<S> {
        Key::Discrete(path.step - 1)
    }
    fn n_keys(&self) -> Option<usize> {
        Some(self.0)
    }
}

/// Features `[1, i/n, x_{i−1}…]` for linear heads.
#[derive(Debug, Clone, Copy)]
pub struct StateFeatures {
    pub n_steps: usize,
}

impl<S: Scalar> KeyExtractor<S> for StateFeatures {
    fn key(&self, path: &PartialPath<'_, S>) -> Key<S> {
        let mut f = vec![S::one(), S::of(path.step as f64 / self.n_steps as f64)];
        f.extend_from_slice(&path.states[path.step - 1]);
        Key::Features(f)
    }
}

/// A scalar-valued function of the key: a table or a linear map of features.
#[derive(Debug, Clone, PartialEq)]
pub enum Head<S> {
    Table(BTreeMap<usize, S>),
    Linear(Vec<S>),
}

impl<S: Scalar> Head<S> {
    pub fn table() -> Self {
        Head::Table(BTreeMap::new())
    }

    pub fn linear() -> Self {
        Head::Linear(Vec::new())
    }

    /// Value at `key` and whether the key was never trained.
    pub fn eval(&self, key: &Key<S>) -> Result<(S, bool)> {
        match (self, key) {
            (Head::Table(t), Key::Discrete(k)) => {
                Ok(t.get(k).map_or((S::zero(), true), |&v| (v, false)))
            }
            (Head::Linear(w), Key::Features(f)) => {
                if w.is_empty() {
                    Ok((S::zero(), true))
                } else if w.len() != f.len() {
                    Err(Error::dim("baseline features", w.len(), f.len()))
                } else {
                    Ok((dot(w, f), false))
                }
            }
            (Head::Table(_), Key::Features(_)) => Err(Error::BaselineKind {
                expected: "discrete key",
                found: "feature key",
            }),
            (Head::Linear(_), Key::Discrete(_)) => Err(Error::BaselineKind {
                expected: "feature key",
                found: "discrete key",
            }),
        }
    }

    /// `φ ← φ − lr · coeff · ∂head/∂φ`.
    pub fn sgd(&mut self, key: &Key<S>, coeff: S, lr: S) -> Result<()> {
        match (self, key) {
            (Head::Table(t), Key::Discrete(k)) => {
                *t.entry(*k).or_insert_with(S::zero) -= lr * coeff;
                Ok(())
            }
            (Head::Linear(w), Key::Features(f)) => {
                if w.is_empty() {
                    w.resize(f.len(), S::zero());
                }
                if w.len() != f.len() {
                    return Err(Error::dim("baseline features", w.len(), f.len()));
                }
                axpy(-lr * coeff, f, w);
                Ok(())
            }
            _ => Err(Error::BaselineKind {
                expected: "matching key and head",
                found: "mismatched key",
            }),
        }
    }

    /// Running-mean update of a table entry from its `count`-th observation.
    fn average(&mut self, key: &Key<S>, obs: S, count: usize) -> Result<()> {
        match (self, key) {
            (Head::Table(t), Key::Discrete(k)) => {
                let e = t.entry(*k).or_insert_with(S::zero);
                *e += (obs - *e) / S::of(count as f64);
                Ok(())
            }
            _ => Err(Error::BaselineKind {
                expected: "tabular head",
                found: "linear head",
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    None,
    Value,
    #[serde(rename = "c_optimal")]
    COptimal,
    #[serde(rename = "c_optimal_per_param")]
    PerParameter,
    FnApprox,
    Direct,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::Value => "value",
            BaselineKind::COptimal => "c_optimal",
            BaselineKind::PerParameter => "c_optimal_per_param",
            BaselineKind::FnApprox => "fn_approx",
            BaselineKind::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            BaselineKind::None,
            BaselineKind::Value,
            BaselineKind::COptimal,
            BaselineKind::PerParameter,
            BaselineKind::FnApprox,
            BaselineKind::Direct,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// How accumulators move towards their targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// `φ ← φ − α∇φ` on the squared loss.
    #[default]
    Sgd,
    /// Exact running means (tabular heads only).
    Averaging,
}

/// Baseline value for one score component.
#[derive(Debug, Clone, PartialEq)]
pub enum Beta<S> {
    Scalar(S),
    PerParameter(Vec<S>),
}

/// A baseline lookup plus flags raised while reading it.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaLookup<S> {
    pub beta: Beta<S>,
    /// Key never trained (β = 0).
    pub cold: bool,
    /// Ratio denominator below the floor (β = 0).
    pub floored: bool,
}

/// Anything that yields `β_i(ξ_i)`.
pub trait BetaSource<S: Scalar> {
    fn beta(&self, step: usize, key: &Key<S>) -> Result<BetaLookup<S>>;
}

#[derive(Debug, Clone, PartialEq)]
enum Phi<S> {
    None,
    Value(Head<S>),
    Ratio { top: Head<S>, bottom: Head<S> },
    PerParameter {
        top: BTreeMap<usize, Vec<S>>,
        bottom: BTreeMap<usize, Vec<S>>,
    },
    Direct(Head<S>),
}

/// Parameters φ of the active baseline family.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState<S> {
    kind: BaselineKind,
    phi: Phi<S>,
    pub lr: S,
    pub floor: S,
    pub mode: UpdateMode,
    m: usize,
    counts: BTreeMap<usize, usize>,
}

impl<S: Scalar> BaselineState<S> {
    /// Tabular baseline of `kind` for a model with `m` parameters, starting at zero.
    pub fn tabular(kind: BaselineKind, m: usize, lr: S) -> Result<Self> {
        let phi = match kind {
            BaselineKind::None => Phi::None,
            BaselineKind::Value => Phi::Value(Head::table()),
            BaselineKind::COptimal => Phi::Ratio {
                top: Head::table(),
                bottom: Head::table(),
            },
            BaselineKind::PerParameter => Phi::PerParameter {
                top: BTreeMap::new(),
                bottom: BTreeMap::new(),
            },
            BaselineKind::Direct => Phi::Direct(Head::table()),
            BaselineKind::FnApprox => {
                return Err(Error::BaselineKind {
                    expected: "tabular kind",
                    found: "fn_approx",
                })
            }
        };
        Self::build(kind, phi, m, lr)
    }

    /// Linear-in-features baseline: `Value`, `Direct`, or `FnApprox` (ratio of two heads).
    pub fn linear(kind: BaselineKind, m: usize, lr: S) -> Result<Self> {
        let phi = match kind {
            BaselineKind::None => Phi::None,
            BaselineKind::Value => Phi::Value(Head::linear()),
            BaselineKind::FnApprox => Phi::Ratio {
                top: Head::linear(),
                bottom: Head::linear(),
            },
            BaselineKind::Direct => Phi::Direct(Head::linear()),
            other => {
                return Err(Error::BaselineKind {
                    expected: "value, direct or fn_approx",
                    found: other.name(),
                })
            }
        };
        Self::build(kind, phi, m, lr)
    }

    fn build(kind: BaselineKind, phi: Phi<S>, m: usize, lr: S) -> Result<Self> {
        if !(lr > S::zero()) {
            return Err(Error::invalid("baseline learning rate", "must be positive"));
        }
        Ok(Self {
            kind,
            phi,
            lr,
            floor: S::of(DEFAULT_FLOOR),
            mode: UpdateMode::Sgd,
            m,
            counts: BTreeMap::new(),
        })
    }

    pub fn none(m: usize) -> Self {
        Self {
            kind: BaselineKind::None,
            phi: Phi::None,
            lr: S::one(),
            floor: S::of(DEFAULT_FLOOR),
            mode: UpdateMode::Sgd,
            m,
            counts: BTreeMap::new(),
        }
    }

    pub fn with_mode(mut self, mode: UpdateMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    /// Sets a tabular value-baseline entry.
    pub fn set_value(&mut self, key: usize, v: S) -> Result<()> {
        match &mut self.phi {
            Phi::Value(Head::Table(t)) | Phi::Direct(Head::Table(t)) => {
                t.insert(key, v);
                Ok(())
            }
            _ => Err(self.kind_error("value or direct table")),
        }
    }

    /// Sets a scalar c-optimal accumulator pair.
    pub fn set_accumulators(&mut self, key: usize, top: S, bottom: S) -> Result<()> {
        match &mut self.phi {
            Phi::Ratio {
                top: Head::Table(t),
                bottom: Head::Table(b),
            } => {
                t.insert(key, top);
                b.insert(key, bottom);
                Ok(())
            }
            _ => Err(self.kind_error("c_optimal")),
        }
    }

    /// Scalar accumulator pair `(φ_{k,1}, φ_{k,2})`.
    pub fn accumulators(&self, key: usize) -> Option<(S, S)> {
        match &self.phi {
            Phi::Ratio {
                top: Head::Table(t),
                bottom: Head::Table(b),
            } => Some((*t.get(&key)?, *b.get(&key)?)),
            _ => None,
        }
    }

    fn kind_error(&self, expected: &'static str) -> Error {
        Error::BaselineKind {
            expected,
            found: self.kind.name(),
        }
    }

    fn ratio(&self, top: S, bottom: S) -> (S, bool) {
        if bottom.abs() < self.floor {
            (S::zero(), true)
        } else {
            (top / bottom, false)
        }
    }

    /// Current β for a discrete key (convenience for reporting).
    pub fn beta_at(&self, key: usize) -> Result<BetaLookup<S>> {
        self.beta(0, &Key::Discrete(key))
    }

    /// Applies the baseline to one gradient sample.
    pub fn apply(
        &self,
        est: &GradEstimate<S>,
        traj: &Trajectory<S>,
        keys: &dyn KeyExtractor<S>,
    ) -> Result<Baselined<S>> {
        apply_baseline(est, self, keys, traj)
    }

    /// One training step from a sampled trajectory.
    ///
    /// `returns` are the value-baseline targets per step (defaults to the
    /// estimate's score weights). Returns ∇φ as a flat list of
    /// `(key, component, value)` entries.
    pub fn update(
        &mut self,
        est: &GradEstimate<S>,
        traj: &Trajectory<S>,
        keys: &dyn KeyExtractor<S>,
        returns: Option<&[S]>,
    ) -> Result<PhiGradient<S>> {
        match self.kind {
            BaselineKind::None => Ok(PhiGradient::default()),
            BaselineKind::Value => update_value_baseline(self, est, traj, keys, returns),
            BaselineKind::COptimal | BaselineKind::FnApprox => update_c_optimal(self, est, traj, keys),
            BaselineKind::PerParameter => update_per_parameter(self, est, traj, keys),
            BaselineKind::Direct => update_direct(self, est, traj, keys),
        }
    }
}

impl<S: Scalar> BetaSource<S> for BaselineState<S> {
    fn beta(&self, _step: usize, key: &Key<S>) -> Result<BetaLookup<S>> {
        let scalar = |(b, cold): (S, bool)| BetaLookup {
            beta: Beta::Scalar(b),
            cold,
            floored: false,
        };
        match &self.phi {
            Phi::None => Ok(scalar((S::zero(), false))),
            Phi::Value(h) | Phi::Direct(h) => h.eval(key).map(scalar),
            Phi::Ratio { top, bottom } => {
                let (t, cold_t) = top.eval(key)?;
                let (b, cold_b) = bottom.eval(key)?;
                let (beta, floored) = self.ratio(t, b);
                Ok(BetaLookup {
                    beta: Beta::Scalar(beta),
                    cold: cold_t || cold_b,
                    floored,
                })
            }
            Phi::PerParameter { top, bottom } => {
                let Key::Discrete(k) = key else {
                    return Err(self.kind_error("discrete key"));
                };
                match (top.get(k), bottom.get(k)) {
                    (Some(t), Some(b)) => {
                        let mut floored = false;
                        let beta = t
                            .iter()
                            .zip(b)
                            .map(|(&t, &b)| {
                                let (v, f) = self.ratio(t, b);
                                floored |= f;
                                v
                            })
                            .collect();
                        Ok(BetaLookup {
                            beta: Beta::PerParameter(beta),
                            cold: false,
                            floored,
                        })
                    }
                    _ => Ok(BetaLookup {
                        beta: Beta::PerParameter(vec![S::zero(); self.m]),
                        cold: true,
                        floored: false,
                    }),
                }
            }
        }
    }
}

/// A baselined gradient sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Baselined<S> {
    pub total: Vec<S>,
    pub cold_start: bool,
    pub floored: bool,
}

/// `pathwise + Σ (W_i − β_i) s_i`, or `(W_i·1 − β_i) ⊙ s_i` per parameter.
pub fn apply_baseline<S: Scalar>(
    est: &GradEstimate<S>,
    source: &dyn BetaSource<S>,
    keys: &dyn KeyExtractor<S>,
    traj: &Trajectory<S>,
) -> Result<Baselined<S>> {
    let m = est.pathwise.len();
    let mut total = est.pathwise.clone();
    let mut cold_start = false;
    let mut floored = false;
    for term in &est.score_terms {
        let key = keys.key(&PartialPath::of(traj, term.step));
        let look = source.beta(term.step, &key)?;
        cold_start |= look.cold;
        floored |= look.floored;
        match look.beta {
            Beta::Scalar(b) => axpy(term.weight - b, &term.score, &mut total),
            Beta::PerParameter(b) => {
                if b.len() != m {
                    return Err(Error::dim("per-parameter baseline", m, b.len()));
                }
                for ((g, &s), &bl) in total.iter_mut().zip(&term.score).zip(&b) {
                    *g += (term.weight - bl) * s;
                }
            }
        }
    }
    Ok(Baselined {
        total,
        cold_start,
        floored,
    })
}

/// Gradient of the baseline objective with respect to φ.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhiGradient<S> {
    /// `(head, key, component, ∂/∂φ)`; head 0 is the value/numerator head,
    /// head 1 the denominator. Linear heads report `key = usize::MAX`.
    pub entries: Vec<(u8, usize, usize, S)>,
}

impl<S: Scalar> PhiGradient<S> {
    fn push_head(&mut self, head: u8, key: &Key<S>, coeff: S) {
        match key {
            Key::Discrete(k) => self.entries.push((head, *k, 0, coeff)),
            Key::Features(f) => {
                for (c, &fv) in f.iter().enumerate() {
                    self.entries.push((head, usize::MAX, c, coeff * fv));
                }
            }
        }
    }

    /// Sum of entries for a table key on a head.
    pub fn at(&self, head: u8, key: usize) -> S {
        self.entries
            .iter()
            .filter(|e| e.0 == head && e.1 == key)
            .map(|e| e.3)
            .sum()
    }
}

fn keyed_terms<S: Scalar>(
    est: &GradEstimate<S>,
    traj: &Trajectory<S>,
    keys: &dyn KeyExtractor<S>,
) -> Vec<Key<S>> {
    est.score_terms
        .iter()
        .map(|t| keys.key(&PartialPath::of(traj, t.step)))
        .collect()
}

fn check_finite_phi<S: Scalar>(g: &PhiGradient<S>) -> Result<()> {
    if g.entries.iter().all(|e| e.3.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite("baseline gradient", None))
    }
}

/// Value baseline: `∇φ = Σ_i −2(f_i − β_i) ∂β_i/∂φ`, then `φ ← φ − α∇φ`.
pub fn update_value_baseline<S: Scalar>(
    state: &mut BaselineState<S>,
    est: &GradEstimate<S>,
    traj: &Trajectory<S>,
    keys: &dyn KeyExtractor<S>,
    returns: Option<&[S]>,
) -> Result<PhiGradient<S>> {
    let key_list = keyed_terms(est, traj, keys);
    let targets: Vec<S> = match returns {
        Some(r) => est
            .score_terms
            .iter()
            .map(|t| r.get(t.step - 1).copied().ok_or_else(|| Error::dim("returns", traj.n_steps(), r.len())))
            .collect::<Result<_>>()?,
        None => est.score_terms.iter().map(|t| t.weight).collect(),
    };
    let (lr, mode) = (state.lr, state.mode);
    let Phi::Value(head) = &mut state.phi else {
        return Err(state.kind_error("value"));
    };
    let mut grad = PhiGradient::default();
    let mut coeffs = Vec::with_capacity(key_list.len());
    for (key, &f) in key_list.iter().zip(&targets) {
        let (b, _) = head.eval(key)?;
        let c = -S::of(2.0) * (f - b);
        grad.push_head(0, key, c);
        coeffs.push(c);
    }
    check_finite_phi(&grad)?;
    match mode {
        UpdateMode::Sgd => {
            for (key, c) in key_list.iter().zip(coeffs) {
                head.sgd(key, c, lr)?;
            }
        }
        UpdateMode::Averaging => {
            for (key, &f) in key_list.iter().zip(&targets) {
                let Key::Discrete(k) = key else {
                    return Err(Error::BaselineKind {
                        expected: "tabular head",
                        found: "linear head",
                    });
                };
                let c = state.counts.entry(*k).or_insert(0);
                *c += 1;
                head.average(key, f, *c)?;
            }
        }
    }
    Ok(grad)
}

/// c-optimal accumulators: `∇φ_{k,1} = −2(ĝ_sf·s_j − φ_{k,1})`, `∇φ_{k,2} = −2(s_j·s_j − φ_{k,2})`.
///
/// Also trains the two linear heads of the function-approximation variant.
pub fn update_c_optimal<S: Scalar>(
    state: &mut BaselineState<S>,
    est: &GradEstimate<S>,
    traj: &Trajectory<S>,
    keys: &dyn KeyExtractor<S>,
) -> Result<PhiGradient<S>> {
    let key_list = keyed_terms(est, traj, keys);
    let g_sf = est.score_sum();
    let obs: Vec<(S, S)> = est
        .score_terms
        .iter()
        .map(|t| (dot(&g_sf, &t.score), dot(&t.score, &t.score)))
        .collect();
    let (lr, mode) = (state.lr, state.mode);
    let Phi::Ratio { top, bottom } = &mut state.phi else {
        return Err(state.kind_error("c_optimal or fn_approx"));
    };
    let mut grad = PhiGradient::default();
    let mut pending = Vec::with_capacity(key_list.len());
    for (key, &(o1, o2)) in key_list.iter().zip(&obs) {
        let c1 = -S::of(2.0) * (o1 - top.eval(key)?.0);
        let c2 = -S::of(2.0) * (o2 - bottom.eval(key)?.0);
        grad.push_head(0, key, c1);
        grad.push_head(1, key, c2);
        pending.push((key, c1, c2));
    }
    check_finite_phi(&grad)?;
    match mode {
        UpdateMode::Sgd => {
            // all observations of a trajectory are evaluated at the same φ
            for (key, c1, c2) in pending {
                top.sgd(key, c1, lr)?;
                bottom.sgd(key, c2, lr)?;
            }
        }
        UpdateMode::Averaging => {
            for (key, &(o1, o2)) in key_list.iter().zip(&obs) {
                let Key::Discrete(k) = key else {
                    return Err(Error::BaselineKind {
                        expected: "tabular head",
                        found: "linear head",
                    });
                };
                let c = state.counts.entry(*k).or_insert(0);
                *c += 1;
                top.average(key, o1, *c)?;
                bottom.average(key, o2, *c)?;
            }
        }
    }
    Ok(grad)
}

/// Componentwise c-optimal accumulators: numerator `(ĝ_sf)_l (s_j)_l`, denominator `(s_j)_l²`.
pub fn update_per_parameter<S: Scalar>(
    state: &mut BaselineState<S>,
    est: &GradEstimate<S>,
    traj: &Trajectory<S>,
    keys: &dyn KeyExtractor<S>,
) -> Result<PhiGradient<S>> {
    let key_list = keyed_terms(est, traj, keys);
    let g_sf = est.score_sum();
    let m = state.m;
    if g_sf.len() != m {
        return Err(Error::dim("per-parameter baseline", m, g_sf.len()));
    }
    let (lr, mode) = (state.lr, state.mode);
    let Phi::PerParameter { top, bottom } = &mut state.phi else {
        return Err(state.kind_error("c_optimal_per_param"));
    };
    let mut grad = PhiGradient::default();
    let mut pending = Vec::new();
    for (key, term) in key_list.iter().zip(&est.score_terms) {
        let Key::Discrete(k) = key else {
            return Err(Error::BaselineKind {
                expected: "discrete key",
                found: "feature key",
            });
        };
        let t = top.get(k).cloned().unwrap_or_else(|| vec![S::zero(); m]);
        let b = bottom.get(k).cloned().unwrap_or_else(|| vec![S::zero(); m]);
        for l in 0..m {
            let o1 = g_sf[l] * term.score[l];
            let o2 = term.score[l] * term.score[l];
            let c1 = -S::of(2.0) * (o1 - t[l]);
            let c2 = -S::of(2.0) * (o2 - b[l]);
            grad.entries.push((0, *k, l, c1));
            grad.entries.push((1, *k, l, c2));
            pending.push((*k, l, o1, o2, c1, c2));
        }
    }
    check_finite_phi(&grad)?;
    for (k, l, o1, o2, c1, c2) in pending {
        let t = top.entry(k).or_insert_with(|| vec![S::zero(); m]);
        let b = bottom.entry(k).or_insert_with(|| vec![S::zero(); m]);
        match mode {
            UpdateMode::Sgd => {
                t[l] -= lr * c1;
                b[l] -= lr * c2;
            }
            UpdateMode::Averaging => {
                let c = state.counts.entry(k).or_insert(0);
                if l == 0 {
                    *c += 1;
                }
                let n = S::of(*c as f64);
                let (tl, bl) = (t[l], b[l]);
                t[l] = tl + (o1 - tl) / n;
                b[l] = bl + (o2 - bl) / n;
            }
        }
    }
    Ok(grad)
}

/// Direct second-moment minimization: `∇φ = −2 Σ_i (ĝ·s_i) ∂β_i/∂φ` with `ĝ` baselined.
pub fn update_direct<S: Scalar>(
    state: &mut BaselineState<S>,
    est: &GradEstimate<S>,
    traj: &Trajectory<S>,
    keys: &dyn KeyExtractor<S>,
) -> Result<PhiGradient<S>> {
    let g = apply_baseline(est, state, keys, traj)?.total;
    let key_list = keyed_terms(est, traj, keys);
    let lr = state.lr;
    let Phi::Direct(head) = &mut state.phi else {
        return Err(state.kind_error("direct"));
    };
    let mut grad = PhiGradient::default();
    for (key, term) in key_list.iter().zip(&est.score_terms) {
        grad.push_head(0, key, -S::of(2.0) * dot(&g, &term.score));
    }
    check_finite_phi(&grad)?;
    for (key, term) in key_list.iter().zip(&est.score_terms) {
        head.sgd(key, -S::of(2.0) * dot(&g, &term.score), lr)?;
    }
    Ok(grad)
}

/// Running mean of a vector of values over iterations from `start` on.
#[derive(Debug, Clone, PartialEq)]
pub struct TailAverage {
    pub start: usize,
    sum: Vec<f64>,
    count: usize,
}

impl TailAverage {
    pub fn new(start: usize, len: usize) -> Self {
        Self {
            start,
            sum: vec![0.0; len],
            count: 0,
        }
    }

    pub fn observe(&mut self, iteration: usize, values: &[f64]) {
        if iteration >= self.start {
            for (s, v) in self.sum.iter_mut().zip(values) {
                *s += v;
            }
            self.count += 1;
        }
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::ScoreTerm;

    fn toy(weights: [f64; 2], scores: [[f64; 2]; 2]) -> (GradEstimate<f64>, Trajectory<f64>) {
        let est = GradEstimate {
            pathwise: vec![0.0, 0.0],
            score_terms: vec![
                ScoreTerm { step: 1, weight: weights[0], score: scores[0].to_vec() },
                ScoreTerm { step: 2, weight: weights[1], score: scores[1].to_vec() },
            ],
            objective: weights[0],
            step_losses: None,
            flagged: false,
        };
        let traj = Trajectory {
            states: vec![vec![0.0]; 3],
            noises: vec![vec![]; 2],
            draws: vec![Some(vec![0.0]), Some(vec![0.0])],
            log_probs: vec![None, None],
            step_losses: None,
            objective: weights[0],
        };
        (est, traj)
    }

    #[test]
    fn value_update_plug_in() {
        let mut s = BaselineState::tabular(BaselineKind::Value, 2, 0.1).unwrap();
        s.set_value(0, 3.0).unwrap();
        let (mut est, traj) = toy([5.0, 5.0], [[1.0, 0.0], [0.0, 1.0]]);
        est.score_terms.truncate(1);
        let g = s.update(&est, &traj, &SingleKey, None).unwrap();
        assert_eq!(g.at(0, 0), -4.0);
        let b = s.beta_at(0).unwrap().beta;
        assert_eq!(b, Beta::Scalar(3.0 + 4.0 * 0.1));
    }

    #[test]
    fn c_optimal_plug_in_and_floor() {
        let mut s = BaselineState::tabular(BaselineKind::COptimal, 2, 0.01).unwrap();
        s.set_accumulators(0, 3.0, 1.0).unwrap();
        // ĝ_sf = 5·[1,0]; ĝ_sf·s = 5
        let (mut est, traj) = toy([5.0, 0.0], [[1.0, 0.0], [0.0, 0.0]]);
        est.score_terms.truncate(1);
        let g = s.update(&est, &traj, &SingleKey, None).unwrap();
        assert_eq!(g.at(0, 0), -4.0);
        assert_eq!(g.at(1, 0), 0.0);

        let fresh = BaselineState::<f64>::tabular(BaselineKind::COptimal, 2, 0.01).unwrap();
        let look = fresh.beta_at(7).unwrap();
        assert!(look.cold);
        let mut z = fresh.clone();
        z.set_accumulators(1, 2.0, 1e-13).unwrap();
        let look = z.beta_at(1).unwrap();
        assert!(look.floored);
        assert_eq!(look.beta, Beta::Scalar(0.0));
    }

    #[test]
    fn per_parameter_degenerate_component_is_zero() {
        let mut s = BaselineState::tabular(BaselineKind::PerParameter, 2, 0.5)
            .unwrap()
            .with_mode(UpdateMode::Averaging);
        let (est, traj) = toy([2.0, 2.0], [[1.0, 0.0], [-1.0, 0.0]]);
        s.update(&est, &traj, &SingleKey, None).unwrap();
        let look = s.beta_at(0).unwrap();
        assert!(look.floored);
        let Beta::PerParameter(b) = look.beta else { panic!() };
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn none_is_identity() {
        let (est, traj) = toy([2.0, 3.0], [[1.0, -1.0], [0.5, 0.25]]);
        let s = BaselineState::none(2);
        assert_eq!(s.apply(&est, &traj, &SingleKey).unwrap().total, est.total());
    }

    #[test]
    fn direct_plug_in_at_zero() {
        let mut s = BaselineState::tabular(BaselineKind::Direct, 2, 0.01).unwrap();
        let (est, traj) = toy([1.0, 1.0], [[0.5, -0.5], [0.5, -0.5]]);
        let g_hat = est.total();
        let g = s.update(&est, &traj, &SingleKey, None).unwrap();
        let expect = -2.0 * (dot(&g_hat, &[0.5, -0.5]) * 2.0);
        assert_eq!(g.at(0, 0), expect);
    }

    #[test]
    fn linear_heads_learn_a_constant() {
        let mut s = BaselineState::linear(BaselineKind::Value, 1, 0.05).unwrap();
        let keys = StateFeatures { n_steps: 2 };
        let (est, traj) = toy([1.0, 1.0], [[1.0, 0.0], [1.0, 0.0]]);
        for _ in 0..2000 {
            s.update(&est, &traj, &keys, None).unwrap();
        }
        let look = s.beta(1, &keys.key(&PartialPath::of(&traj, 1))).unwrap();
        let Beta::Scalar(b) = look.beta else { panic!() };
        assert!((b - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kinds_round_trip() {
        for k in [
            BaselineKind::None,
            BaselineKind::Value,
            BaselineKind::COptimal,
            BaselineKind::PerParameter,
            BaselineKind::FnApprox,
            BaselineKind::Direct,
        ] {
            assert_eq!(BaselineKind::parse(k.name()), Some(k));
        }
    }

    #[test]
    fn tail_average() {
        let mut t = TailAverage::new(2, 1);
        for i in 0..4 {
            t.observe(i, &[i as f64]);
        }
        assert_eq!(t.mean(), Some(vec![2.5]));
    }
}
