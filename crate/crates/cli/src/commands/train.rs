//! SGD replications; one row per recorded iteration and replication.

use stochadj::sgd_replications;

use super::{finite_support, metric, Ctx};
use crate::error::{CliError, CliResult, Context};
use crate::output::{num, opt};

pub fn run(ctx: &Ctx) -> CliResult<()> {
    let p = ctx.problem()?;
    let sgd = ctx.cfg.sgd(ctx.seed);
    if sgd.track_exact_variance && !finite_support(&ctx.cfg.problem) {
        return Err(CliError::config(
            "oracle.exact_variance",
            "exact variance needs a problem with finite support",
        ));
    }
    let runs = sgd_replications(&p, &sgd).field("sgd")?;
    let metric = metric(&ctx.cfg.problem)?;
    let m = p.theta0.len();
    let n_beta = runs
        .iter()
        .flat_map(|r| r.records.first())
        .map(|r| r.baseline.len())
        .max()
        .unwrap_or(0);

    let mut header = vec!["iter".to_string(), "rep".into(), "objective".into()];
    if let Some((name, _)) = &metric {
        header.push(name.to_string());
    }
    header.push("variance".into());
    header.extend((0..m).map(|j| format!("theta_{j}")));
    header.extend((0..n_beta).map(|k| format!("beta_{k}")));

    let every = ctx.cfg.train.record_every;
    let mut out = ctx.dest.open()?;
    out.row(&header)?;
    for run in &runs {
        let last = run.records.len().saturating_sub(1);
        for (i, rec) in run.records.iter().enumerate() {
            if i % every != 0 && i != last {
                continue;
            }
            let mut row = vec![rec.iteration.to_string(), run.replication.to_string(), num(rec.objective)];
            if let Some((_, f)) = &metric {
                row.push(num(f(&rec.theta)));
            }
            row.push(opt(rec.exact_variance));
            row.extend(rec.theta.iter().map(|v| num(*v)));
            row.extend((0..n_beta).map(|k| opt(rec.baseline.get(k).copied())));
            out.row(&row)?;
        }
    }
    out.finish()?;

    let finals: Vec<f64> = match &metric {
        Some((_, f)) => runs.iter().map(|r| f(&r.final_theta)).collect(),
        None => Vec::new(),
    };
    if let Some((name, _)) = &metric {
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        eprintln!("{} replications, mean final {name} {mean:.4}", runs.len());
    } else {
        eprintln!("{} replications", runs.len());
    }
    if let Some(bad) = runs.iter().find(|r| !r.completed()) {
        let why = bad.aborted.as_deref().unwrap_or("non-finite value");
        return Err(CliError::Numerical(format!("replication {} aborted: {why}", bad.replication)));
    }
    Ok(())
}
