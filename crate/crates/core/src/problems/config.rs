//! JSON description of a problem instance.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{SingleKey, StateFeatures, StepKey};
use crate::error::{Error, Result};
use crate::problems::ovm::{fleet, OvmData, OvmProblem, OvmSynthesis, N_PARAMS};
use crate::problems::piecewise::{default_piecewise_scenario, PiecewiseOdeProblem};
use crate::problems::sde::{SdeProblem, SdeVariant};
use crate::problems::{BanditProblem, CoinFlipProblem, Problem};
use crate::scalar::Scalar;

/// Keys used to condition tabular or linear baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyConfig {
    /// The problem's own keys.
    #[default]
    Native,
    Single,
    Step,
    StateFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    CoinFlip {
        #[serde(default)]
        theta0: Option<Vec<f64>>,
        #[serde(default)]
        payoff: Option<[f64; 3]>,
        #[serde(default)]
        keys: KeyConfig,
    },
    Bandit {
        #[serde(default)]
        rewards: Option<Vec<f64>>,
        #[serde(default)]
        theta0: Option<Vec<f64>>,
    },
    Piecewise {
        #[serde(default)]
        theta0: Option<[f64; 3]>,
        /// Lead positions `lead_0 .. lead_n`; the default scenario when absent.
        #[serde(default)]
        lead: Option<Vec<f64>>,
        #[serde(default)]
        targets: Option<Vec<f64>>,
        #[serde(default)]
        x0: Option<f64>,
    },
    Sde {
        variant: String,
        dim: usize,
        n_steps: usize,
        dt: f64,
        #[serde(default = "one")]
        lag: usize,
        /// `D_1 .. D_τ`, row-major.
        drift: Vec<f64>,
        offset: Vec<f64>,
        /// Packed lower triangle of `A` (log diagonal), or jump logits.
        noise: Vec<f64>,
        #[serde(default)]
        jumps: Option<Vec<f64>>,
        x0: Vec<f64>,
        #[serde(default)]
        target: Option<Vec<f64>>,
    },
    Ovm {
        /// CSV recording; synthesized when absent.
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synthesis: Option<OvmSynthesis>,
        #[serde(default = "one")]
        vehicles: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_lead_len")]
        lead_len: f64,
        #[serde(default)]
        theta0: Option<[f64; 5]>,
        #[serde(default)]
        bounds: Option<Vec<[f64; 2]>>,
    },
}

fn one() -> usize {
    1
}

fn default_lead_len() -> f64 {
    5.0
}

/// Default OVM starting point and box.
pub const OVM_THETA0: [f64; 5] = [8.0, 0.15, 1.2, 1.0, 0.3];
pub const OVM_BOUNDS: [[f64; 2]; 5] = [[1.0, 40.0], [0.01, 1.0], [0.0, 5.0], [0.05, 5.0], [-2.0, 5.0]];

fn of_vec<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::of(x)).collect()
}

fn check_len(what: &str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dim(what, expected, v.len()));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::non_finite(what, None));
    }
    Ok(())
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// OVM recording described by this config, if it is an OVM config.
    pub fn ovm_data(&self) -> Result<Option<OvmData>> {
        match self {
            ProblemConfig::Ovm { data: Some(path), .. } => Ok(Some(OvmData::load(path)?)),
            ProblemConfig::Ovm { synthesis, seed, .. } => Ok(Some(crate::problems::synthesize_ovm_data(
                &synthesis.clone().unwrap_or_default(),
                *seed,
            )?)),
            _ => Ok(None),
        }
    }
}

/// The concrete OVM model of an OVM config, with the generating parameters
/// when the data are synthetic. `None` for other problem kinds.
pub fn ovm_model<S: Scalar>(cfg: &ProblemConfig) -> Result<Option<(OvmProblem<S>, Option<[f64; N_PARAMS]>)>> {
    let ProblemConfig::Ovm {
        data,
        synthesis,
        vehicles,
        seed,
        lead_len,
        ..
    } = cfg
    else {
        return Ok(None);
    };
    if *vehicles == 0 {
        return Err(Error::invalid("vehicles", "must be positive"));
    }
    Ok(Some(match data {
        Some(path) => {
            if *vehicles != 1 {
                return Err(Error::invalid("vehicles", "a recorded file describes one vehicle"));
            }
            let d = OvmData::load(path)?;
            (OvmProblem::new(S::of(d.dt()?), vec![d.to_vehicle(*lead_len)])?, None)
        }
        None => {
            let mut syn = synthesis.clone().unwrap_or_default();
            syn.lead_len = *lead_len;
            (fleet(&syn, *vehicles, *seed)?, Some(syn.true_params))
        }
    }))
}

/// Instantiates the problem described by `cfg`.
pub fn build<S: Scalar>(cfg: &ProblemConfig) -> Result<Problem<S>> {
    match cfg {
        ProblemConfig::CoinFlip { theta0, payoff, keys } => {
            let theta0 = theta0.clone().unwrap_or_else(|| vec![1.0, 1.0]);
            check_len("theta0", 2, &theta0)?;
            let mut p = CoinFlipProblem::default();
            if let Some(pay) = payoff {
                check_len("payoff", 3, pay)?;
                p.payoff = [S::of(pay[0]), S::of(pay[1]), S::of(pay[2])];
            }
            let prob = p.problem(of_vec(&theta0));
            Ok(match keys {
                KeyConfig::Native => prob,
                KeyConfig::Single => prob.with_keys(Arc::new(SingleKey)),
                KeyConfig::Step => prob.with_keys(Arc::new(StepKey(2))),
                KeyConfig::StateFeatures => prob.with_keys(Arc::new(StateFeatures { n_steps: 2 })),
            })
        }
        ProblemConfig::Bandit { rewards, theta0 } => {
            let b = match rewards {
                Some(r) => BanditProblem::new(of_vec(r))?,
                None => BanditProblem::default(),
            };
            let k = b.rewards.len();
            let theta0 = theta0.clone().unwrap_or_else(|| vec![0.0; k]);
            check_len("theta0", k, &theta0)?;
            Ok(b.problem(of_vec(&theta0)))
        }
        ProblemConfig::Piecewise { theta0, lead, targets, x0 } => {
            let p = match (lead, targets) {
                (None, None) => default_piecewise_scenario(),
                (Some(l), Some(t)) => PiecewiseOdeProblem::new(of_vec(l), of_vec(t))?,
                _ => return Err(Error::invalid("lead", "lead and targets must be given together")),
            };
            let th = theta0.unwrap_or([2.1, 0.5, 0.3]);
            check_len("theta0", 3, &th)?;
            if th[2] <= 0.0 {
                return Err(Error::invalid("theta0", "switch scale must be positive"));
            }
            Ok(p.problem(S::of(x0.unwrap_or(0.0)), of_vec(&th)))
        }
        ProblemConfig::Sde {
            variant,
            dim,
            n_steps,
            dt,
            lag,
            drift,
            offset,
            noise,
            jumps,
            x0,
            target,
        } => {
            let v = SdeVariant::parse(variant)
                .ok_or_else(|| Error::invalid("variant", format!("unknown SDE variant {variant:?}")))?;
            let mut p = SdeProblem::<S>::new(v, *dim, *n_steps, *dt, *lag)?;
            if let Some(j) = jumps {
                p = p.with_jumps(of_vec(j))?;
            }
            if let Some(t) = target {
                p = p.with_target(of_vec(t))?;
            }
            check_len("x0", *dim, x0)?;
            let theta = p.pack(&of_vec(drift), &of_vec(offset), &of_vec(noise))?;
            Ok(p.problem(of_vec(x0), theta))
        }
        ProblemConfig::Ovm { theta0, bounds, .. } => {
            let (model, _) = ovm_model(cfg)?.expect("ovm config");
            let th = theta0.unwrap_or(OVM_THETA0);
            let b = bounds.clone().unwrap_or_else(|| OVM_BOUNDS.to_vec());
            check_len("theta0", N_PARAMS, &th)?;
            if b.len() != N_PARAMS {
                return Err(Error::dim("bounds", N_PARAMS, b.len()));
            }
            if b.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(Error::invalid("bounds", "each lower bound must not exceed its upper bound"));
            }
            let n = model.vehicles.len();
            let theta: Vec<S> = (0..n).flat_map(|_| of_vec::<S>(&th)).collect();
            let bx: Vec<(S, S)> = (0..n)
                .flat_map(|_| b.iter().map(|[lo, hi]| (S::of(*lo), S::of(*hi))))
                .collect();
            Ok(model.problem(theta, bx))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_builds_each_kind() {
        let texts = [
            r#"{"kind":"coin_flip"}"#,
            r#"{"kind":"bandit","theta0":[3,2,1]}"#,
            r#"{"kind":"piecewise","theta0":[2.1,0.1,0.3]}"#,
            r#"{"kind":"sde","variant":"pathwise","dim":1,"n_steps":3,"dt":0.1,
                "drift":[-0.5],"offset":[0.1],"noise":[-1.0],"x0":[1.0]}"#,
            r#"{"kind":"ovm","synthesis":{"n_steps":20},"vehicles":2}"#,
        ];
        let dims = [2, 3, 3, 3, 10];
        for (t, d) in texts.iter().zip(dims) {
            let cfg = ProblemConfig::from_json(t).unwrap();
            let p = build::<f64>(&cfg).unwrap();
            assert_eq!(p.model.param_dim(), d, "{t}");
            assert_eq!(p.theta0.len(), d);
        }
    }

    #[test]
    fn rejects_unknown_fields_and_bad_shapes() {
        assert!(ProblemConfig::from_json(r#"{"kind":"coin_flip","bogus":1}"#).is_err());
        assert!(ProblemConfig::from_json(r#"{"kind":"nope"}"#).is_err());
        let bad = ProblemConfig::from_json(r#"{"kind":"bandit","theta0":[1,2]}"#).unwrap();
        assert!(build::<f64>(&bad).is_err());
        let bad = ProblemConfig::from_json(r#"{"kind":"piecewise","theta0":[2,0.1,0]}"#).unwrap();
        assert!(build::<f64>(&bad).is_err());
        assert!(ProblemConfig::from_json(r#"{"kind":"ovm","synthesis":{"n_step":20}}"#).is_err());
    }
}
