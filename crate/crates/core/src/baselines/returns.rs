//! Per-step score weights from per-step losses: tail sums, discounting,
//! bootstrapping and generalized advantage estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnMode {
    /// `Σ_{k≥i} f̂_k`; ignores γ.
    #[default]
    Raw,
    /// `Σ_{k≥i} γ^{k−i} f̂_k`.
    Discounted,
    /// `f̂_i + γ V̂(ξ_{i+1})`.
    Bootstrap,
    /// Exponential κ-average of the bootstrapped family.
    Gae,
}

impl ReturnMode {
    pub fn name(self) -> &'static str {
        match self {
            ReturnMode::Raw => "raw",
            ReturnMode::Discounted => "discounted",
            ReturnMode::Bootstrap => "bootstrap",
            ReturnMode::Gae => "gae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ReturnMode::Raw, ReturnMode::Discounted, ReturnMode::Bootstrap, ReturnMode::Gae]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "S: Scalar + Deserialize<'de>"))]
pub struct ReturnSpec<S: Scalar> {
    pub gamma: S,
    pub kappa: S,
    pub mode: ReturnMode,
}

impl<S: Scalar> Default for ReturnSpec<S> {
    fn default() -> Self {
        Self {
            gamma: S::one(),
            kappa: S::one(),
            mode: ReturnMode::Raw,
        }
    }
}

impl<S: Scalar> ReturnSpec<S> {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: S| v >= S::zero() && v <= S::one();
        if !unit(self.gamma) {
            return Err(Error::invalid("gamma", format!("{} is outside [0, 1]", self.gamma)));
        }
        if !unit(self.kappa) {
            return Err(Error::invalid("kappa", format!("{} is outside [0, 1]", self.kappa)));
        }
        Ok(())
    }

    pub fn needs_values(&self) -> bool {
        matches!(self.mode, ReturnMode::Bootstrap | ReturnMode::Gae)
    }
}

/// Weights `f_1..f_n` from losses `f̂_1..f̂_n`.
///
/// `values[i−1]` is `V̂(ξ_i)`; `V̂(ξ_{n+1})` is taken as zero.
pub fn compute_returns<S: Scalar>(losses: &[S], values: Option<&[S]>, spec: &ReturnSpec<S>) -> Result<Vec<S>> {
    spec.validate()?;
    let n = losses.len();
    let next_value = |values: &[S], i: usize| if i + 1 < n { values[i + 1] } else { S::zero() };
    let need = |values: Option<&[S]>| -> Result<Vec<S>> {
        let v = values.ok_or(Error::MissingValues(spec.mode.name()))?;
        if v.len() != n {
            return Err(Error::dim("value estimates", n, v.len()));
        }
        Ok(v.to_vec())
    };
    let mut out = vec![S::zero(); n];
    match spec.mode {
        ReturnMode::Raw => {
            let mut acc = S::zero();
            for i in (0..n).rev() {
                acc += losses[i];
                out[i] = acc;
            }
        }
        ReturnMode::Discounted => {
            let mut acc = S::zero();
            for i in (0..n).rev() {
                acc = losses[i] + spec.gamma * acc;
                out[i] = acc;
            }
        }
        ReturnMode::Bootstrap => {
            let v = need(values)?;
            for i in 0..n {
                out[i] = losses[i] + spec.gamma * next_value(&v, i);
            }
        }
        ReturnMode::Gae => {
            let v = need(values)?;
            let mut acc = S::zero();
            for i in (0..n).rev() {
                acc = if i + 1 == n {
                    losses[i]
                } else {
                    losses[i] + spec.gamma * ((S::one() - spec.kappa) * v[i + 1] + spec.kappa * acc)
                };
                out[i] = acc;
            }
        }
    }
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::non_finite("returns", None))
    }
}
