//! OVM parameter recovery by projected gradient descent.

use stochadj::estimator::{deterministic_adjoint, deterministic_objective, finite_difference_gradient};
use stochadj::gd_calibrate;
use stochadj::oracle::relative_gap;
use stochadj::problems::ovm_model;
use stochadj::problems::ovm::N_PARAMS;

use super::Ctx;
use crate::error::{CliError, CliResult, Context};
use crate::output::{num, opt};

const PARAM_NAMES: [&str; N_PARAMS] = ["c1", "c2", "c3", "c4", "c5"];

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let (model, truth) = ovm_model::<f64>(&ctx.cfg.problem)
        .field("problem")?
        .ok_or_else(|| CliError::config("problem.kind", "calibrate-ovm needs an ovm problem"))?;
    let p = ctx.problem()?;
    let n = model.vehicles.len();
    let mut start = match ctx.cfg.calibrate.start_scale {
        Some(s) => {
            let t = truth.ok_or_else(|| {
                CliError::config("calibrate.start_scale", "needs synthetic data with known parameters")
            })?;
            (0..n).flat_map(|_| t.map(|c| c * s)).collect()
        }
        None => p.theta0.clone(),
    };
    p.project(&mut start);

    let loss = &p.loss;
    let x0 = &p.x0;
    let adj = deterministic_adjoint(&model, loss, &start, x0).field("problem")?.gradient;
    let fd = finite_difference_gradient(|t| deterministic_objective(&model, loss, t, x0), &start, 1e-6)
        .field("problem")?;
    let gap = relative_gap(&adj, &fd);

    let cal = gd_calibrate(&p, &start, &ctx.cfg.calibrate.settings()).field("calibrate")?;
    if !cal.loss.is_finite() {
        return Err(CliError::Numerical("calibrated loss is not finite".into()));
    }
    let rmse_start = model.rmse(&start).field("problem")?;
    let rmse = model.rmse(&cal.theta).field("problem")?;
    // smallest per-vehicle spread of follower positions
    let range = model
        .vehicles
        .iter()
        .map(|v| {
            let all = v.measured.iter().chain(std::iter::once(&v.x0[0]));
            let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
            hi - lo
        })
        .fold(f64::INFINITY, f64::min);

    let mut out = ctx.dest.open()?;
    out.row(["quantity", "true_value", "start", "recovered"])?;
    for v in 0..n {
        for (j, name) in PARAM_NAMES.iter().enumerate() {
            let k = v * N_PARAMS + j;
            let label = if n == 1 { name.to_string() } else { format!("v{v}.{name}") };
            out.row([label, opt(truth.map(|t| t[j])), num(start[k]), num(cal.theta[k])])?;
        }
    }
    out.row(["rmse".into(), num(0.0), num(rmse_start), num(rmse)])?;
    out.row(["loss".into(), String::new(), num(cal.losses[0]), num(cal.loss)])?;
    out.row(["position_range".into(), num(range), String::new(), String::new()])?;
    out.row(["adjoint_fd_gap".into(), String::new(), num(gap), String::new()])?;
    out.row(["iterations".into(), String::new(), String::new(), cal.iterations.to_string()])?;
    out.finish()?;

    eprintln!(
        "RMSE {rmse:.3e} (gate {:.3e}), adjoint/FD gap {gap:.2e}, {} iterations{}",
        1e-2 * range,
        cal.iterations,
        if cal.converged { ", converged" } else { "" }
    );
    Ok(())
}
