//! Wall-clock cost of objective, adjoint and finite-difference gradients.

use stochadj::problems::ovm::{cost_scaling, OvmSynthesis};
use stochadj::ProblemConfig;

use super::Ctx;
use crate::error::{CliError, CliResult, Context};
use crate::output::num;

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let syn = match &ctx.cfg.problem {
        ProblemConfig::Ovm { data: Some(_), .. } => {
            return Err(CliError::config("problem.data", "cost-scaling synthesizes its fleets; remove `data`"))
        }
        ProblemConfig::Ovm { synthesis, lead_len, .. } => {
            let mut s = synthesis.clone().unwrap_or_else(OvmSynthesis::default);
            s.lead_len = *lead_len;
            s
        }
        _ => return Err(CliError::config("problem.kind", "cost-scaling needs an ovm problem")),
    };
    let rows = cost_scaling(&syn, &ctx.cfg.cost.vehicle_counts, ctx.cfg.cost.repeats, ctx.seed).field("cost")?;
    let mut out = ctx.dest.open()?;
    out.row(["m", "t_objective", "t_adjoint", "t_fd"])?;
    for r in &rows {
        out.row([r.m.to_string(), num(r.t_objective), num(r.t_adjoint), num(r.t_fd)])?;
        eprintln!(
            "m = {}: adjoint/objective {:.2}, fd/objective {:.1}",
            r.m,
            r.t_adjoint / r.t_objective,
            r.t_fd / r.t_objective
        );
    }
    out.finish()
}
