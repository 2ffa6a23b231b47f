pub mod calibrate;
pub mod cost;
pub mod grad_check;
pub mod train;
pub mod variance_sweep;

use stochadj::oracle::{enumerate, EnumerationReport};
use stochadj::problems::{build, BanditProblem, CoinFlipProblem};
use stochadj::{Problem64, ProblemConfig};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, Context};
use crate::output::Destination;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub dest: Destination,
}

impl Ctx {
    pub fn problem(&self) -> CliResult<Problem64> {
        build::<f64>(&self.cfg.problem).field("problem")
    }

    /// The problem with θ replaced; its length must match.
    pub fn problem_at(&self, theta: Vec<f64>) -> CliResult<Problem64> {
        let mut p = self.problem()?;
        if theta.len() != p.theta0.len() {
            return Err(CliError::config(
                "problem.theta0",
                format!("expected {} values, got {}", p.theta0.len(), theta.len()),
            ));
        }
        p.theta0 = theta;
        Ok(p)
    }
}

pub fn exact(p: &Problem64, field: &str) -> CliResult<EnumerationReport<f64>> {
    enumerate(p.model.as_ref(), &p.loss, &p.theta0, &p.x0).field(field)
}

/// True when every step of the configured problem has a finite support.
pub fn finite_support(cfg: &ProblemConfig) -> bool {
    match cfg {
        ProblemConfig::CoinFlip { .. } | ProblemConfig::Bandit { .. } | ProblemConfig::Piecewise { .. } => true,
        ProblemConfig::Sde { variant, .. } => variant == "jump",
        ProblemConfig::Ovm { .. } => false,
    }
}

/// Problem-specific summary of θ: P(heads) for the coin flip, expected reward for the bandit.
pub fn metric(cfg: &ProblemConfig) -> CliResult<Option<(&'static str, Box<dyn Fn(&[f64]) -> f64>)>> {
    Ok(match cfg {
        ProblemConfig::CoinFlip { .. } => Some(("p_heads", Box::new(|t: &[f64]| CoinFlipProblem::<f64>::p_heads(t)))),
        ProblemConfig::Bandit { rewards, .. } => {
            let b = match rewards {
                Some(r) => BanditProblem::new(r.clone()).field("problem.rewards")?,
                None => BanditProblem::default(),
            };
            Some(("reward", Box::new(move |t: &[f64]| b.expected_reward(t))))
        }
        _ => None,
    })
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    stochadj::distributions::softmax(x)
}
