//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use stochadj::optimize::CalibrateConfig;
use stochadj::{BaselineKind, ProblemConfig, ReturnSpec, SgdConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Shorthand for `sgd.baseline`; wins when both are given.
    #[serde(default)]
    pub baseline: Option<BaselineKind>,
    /// Shorthand for `sgd.returns`; wins when both are given.
    #[serde(default)]
    pub returns: Option<ReturnSpec<f64>>,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub calibrate: CalibrateSection,
    #[serde(default)]
    pub cost: CostConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    ExactVariance,
    OptimalBaseline,
    ExactGradient,
    Unbiasedness,
    CrnFd,
    Gae,
    Partials,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::ExactVariance => "exact_variance",
            CheckKind::OptimalBaseline => "optimal_baseline",
            CheckKind::ExactGradient => "exact_gradient",
            CheckKind::Unbiasedness => "unbiasedness",
            CheckKind::CrnFd => "crn_fd",
            CheckKind::Gae => "gae",
            CheckKind::Partials => "partials",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Track the exact estimator variance during `train`.
    pub exact_variance: bool,
    /// Checks run by `grad-check`; chosen from the problem when empty.
    pub checks: Vec<CheckKind>,
    /// Monte Carlo samples for variance and unbiasedness checks.
    pub samples: usize,
    /// Finite-difference step; 0.05 for the z-test, 1e-5 for CRN.
    pub fd_step: Option<f64>,
    pub crn_samples: usize,
    /// Random points per family in the GAE and partials checks.
    pub points: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            exact_variance: false,
            checks: Vec::new(),
            samples: 100_000,
            fd_step: None,
            crn_samples: 2_000,
            points: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepBaseline {
    None,
    Value,
    COptimal,
    COptimalPerParam,
    QFunction,
}

impl SweepBaseline {
    pub const ALL: [SweepBaseline; 5] = [
        SweepBaseline::None,
        SweepBaseline::Value,
        SweepBaseline::COptimal,
        SweepBaseline::COptimalPerParam,
        SweepBaseline::QFunction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepBaseline::None => "none",
            SweepBaseline::Value => "value",
            SweepBaseline::COptimal => "c_optimal",
            SweepBaseline::COptimalPerParam => "c_optimal_per_param",
            SweepBaseline::QFunction => "q_function",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Index of the swept coordinate of θ.
    pub coordinate: usize,
    pub values: Vec<f64>,
    #[serde(default = "all_baselines")]
    pub baselines: Vec<SweepBaseline>,
}

fn all_baselines() -> Vec<SweepBaseline> {
    SweepBaseline::ALL.to_vec()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Write every k-th iteration; the last one is always written.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { record_every: 1 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    /// Start from the generating parameters times this factor (synthetic data only).
    pub start_scale: Option<f64>,
    pub max_iterations: usize,
    pub armijo: f64,
    pub shrink: f64,
    pub tolerance: f64,
    pub max_backtracks: usize,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        let d = CalibrateConfig::default();
        Self {
            start_scale: None,
            max_iterations: d.max_iterations,
            armijo: d.armijo,
            shrink: d.shrink,
            tolerance: d.tolerance,
            max_backtracks: d.max_backtracks,
        }
    }
}

impl CalibrateSection {
    pub fn settings(&self) -> CalibrateConfig {
        CalibrateConfig {
            max_iterations: self.max_iterations,
            armijo: self.armijo,
            shrink: self.shrink,
            tolerance: self.tolerance,
            max_backtracks: self.max_backtracks,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub vehicle_counts: Vec<usize>,
    pub repeats: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            vehicle_counts: vec![1, 10],
            repeats: 15,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::config("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SGD settings with the top-level overrides applied.
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        let mut s = self.sgd.clone();
        if let Some(b) = self.baseline {
            s.baseline = b;
        }
        if let Some(r) = self.returns {
            s.returns = r;
        }
        s.seed = seed;
        s.track_exact_variance |= self.oracle.exact_variance;
        s
    }

    /// Seed used by every subcommand: the CLI flag, then the config, then `sgd.seed`.
    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(self.sgd.seed)
    }

    fn validate(&self) -> CliResult<()> {
        let s = self.sgd(0);
        s.validate().map_err(|e| match e {
            stochadj::Error::InvalidParameter { name, reason } => CliError::config(&format!("sgd.{name}"), reason),
            other => CliError::config("sgd", other),
        })?;
        let o = &self.oracle;
        if o.samples < 2 {
            return Err(CliError::config("oracle.samples", "must be at least 2"));
        }
        if o.crn_samples < 2 {
            return Err(CliError::config("oracle.crn_samples", "must be at least 2"));
        }
        if o.points == 0 {
            return Err(CliError::config("oracle.points", "must be at least 1"));
        }
        if let Some(h) = o.fd_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::config("oracle.fd_step", "must be positive"));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(CliError::config("sweep.values", "must not be empty"));
            }
            if sw.values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::config("sweep.values", "must be finite"));
            }
            if sw.baselines.is_empty() {
                return Err(CliError::config("sweep.baselines", "must not be empty"));
            }
        }
        if self.train.record_every == 0 {
            return Err(CliError::config("train.record_every", "must be at least 1"));
        }
        let c = &self.calibrate;
        if let Some(s) = c.start_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CliError::config("calibrate.start_scale", "must be positive"));
            }
        }
        if c.max_iterations == 0 {
            return Err(CliError::config("calibrate.max_iterations", "must be at least 1"));
        }
        if !(c.shrink > 0.0 && c.shrink < 1.0) {
            return Err(CliError::config("calibrate.shrink", "must lie in (0, 1)"));
        }
        if !(c.armijo > 0.0 && c.armijo < 1.0) {
            return Err(CliError::config("calibrate.armijo", "must lie in (0, 1)"));
        }
        if !(c.tolerance >= 0.0) {
            return Err(CliError::config("calibrate.tolerance", "must be non-negative"));
        }
        if self.cost.vehicle_counts.is_empty() || self.cost.vehicle_counts.contains(&0) {
            return Err(CliError::config("cost.vehicle_counts", "must be a non-empty list of positive counts"));
        }
        if self.cost.repeats == 0 {
            return Err(CliError::config("cost.repeats", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::parse(r#"{"problem":{"kind":"coin_flip"}}"#).unwrap();
        assert_eq!(c.oracle.samples, 100_000);
        assert_eq!(c.seed(Some(5)), 5);
        assert_eq!(c.seed(None), 0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = ExperimentConfig::parse(r#"{"problem":{"kind":"coin_flip"},"bogus":1}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("bogus"));
        let e = ExperimentConfig::parse(r#"{"problem":{"kind":"coin_flip"},"sgd":{"lr":1}}"#).unwrap_err();
        assert!(e.to_string().contains("lr"));
    }

    #[test]
    fn validation_names_the_field() {
        let e = ExperimentConfig::parse(r#"{"problem":{"kind":"coin_flip"},"sgd":{"lr_theta":-1}}"#).unwrap_err();
        assert!(e.to_string().contains("sgd.lr_theta"), "{e}");
        let e = ExperimentConfig::parse(r#"{"problem":{"kind":"coin_flip"},"sweep":{"coordinate":1,"values":[]}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("sweep.values"), "{e}");
    }

    #[test]
    fn top_level_overrides_win() {
        let c = ExperimentConfig::parse(
            r#"{"problem":{"kind":"coin_flip"},"baseline":"value","sgd":{"baseline":"c_optimal"},"seed":4}"#,
        )
        .unwrap();
        let s = c.sgd(c.seed(None));
        assert_eq!(s.baseline, BaselineKind::Value);
        assert_eq!(s.seed, 4);
    }

    #[test]
    fn shipped_examples_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples");
        let mut n = 0;
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 13);
    }
}
