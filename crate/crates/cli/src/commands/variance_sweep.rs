//! Exact single-sample variance of the estimator under each oracle baseline.

use rayon::prelude::*;
use stochadj::oracle::exact_optimal_baselines;

use super::{exact, Ctx};
use crate::config::SweepBaseline;
use crate::error::{CliError, CliResult, Context};
use crate::output::num;

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let sweep = ctx
        .cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::config("sweep", "variance-sweep needs a `sweep` section"))?;
    let base = ctx.problem()?;
    if sweep.coordinate >= base.theta0.len() {
        return Err(CliError::config(
            "sweep.coordinate",
            format!("θ has {} coordinates", base.theta0.len()),
        ));
    }
    let rows: Vec<Vec<(SweepBaseline, f64)>> = sweep
        .values
        .par_iter()
        .map(|&v| {
            let mut theta = base.theta0.clone();
            theta[sweep.coordinate] = v;
            let p = ctx.problem_at(theta)?;
            let rep = exact(&p, "problem")?;
            let opt = exact_optimal_baselines(&rep, p.keys.as_ref()).field("problem")?;
            sweep
                .baselines
                .iter()
                .map(|&b| {
                    let var = match b {
                        SweepBaseline::None => rep.variance,
                        SweepBaseline::Value => rep.baselined(&opt.value, p.keys.as_ref()).field("problem")?.variance,
                        SweepBaseline::COptimal => rep.baselined(&opt.scalar, p.keys.as_ref()).field("problem")?.variance,
                        SweepBaseline::COptimalPerParam => {
                            rep.baselined(&opt.per_parameter, p.keys.as_ref()).field("problem")?.variance
                        }
                        SweepBaseline::QFunction => {
                            rep.baselined(&opt.q_function, p.keys.as_ref()).field("problem")?.variance
                        }
                    };
                    if !var.is_finite() {
                        return Err(CliError::Numerical(format!("variance at θ[{}] = {v} is not finite", sweep.coordinate)));
                    }
                    Ok((b, var))
                })
                .collect()
        })
        .collect::<CliResult<_>>()?;

    let mut out = ctx.dest.open()?;
    out.row(["theta_value", "baseline_kind", "variance"])?;
    for (v, per) in sweep.values.iter().zip(&rows) {
        for (b, var) in per {
            out.row([num(*v), b.name().to_string(), num(*var)])?;
        }
    }
    out.finish()
}
