//! Optimal-velocity car following, Euler-discretized.
//!
//! `ẍ = c₄ (V(s) − v)` with `V(s) = c₁ [tanh(c₂ s − c₃ − c₅) − tanh(−c₃)]` and
//! headway `s = x_lead − x − l_lead`. Several independent followers can share
//! one model; each contributes its own five parameters and two states.

use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{deterministic_adjoint, deterministic_objective, finite_difference_gradient};
use crate::model::{LossSpec, StepContext, StepModel, StepVjp};
use crate::problems::Problem;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

pub const N_PARAMS: usize = 5;

/// Acceleration with partials `(a, ∂a/∂c, ∂a/∂s, ∂a/∂v)`.
pub fn ovm_accel<S: Scalar>(c: &[S], s: S, v: S) -> (S, [S; 5], S, S) {
    let one = S::one();
    let t = (c[1] * s - c[2] - c[4]).tanh();
    let t0 = (-c[2]).tanh();
    let vs = c[0] * (t - t0);
    let sech2 = one - t * t;
    let a = c[3] * (vs - v);
    let dv = [
        t - t0,
        c[0] * sech2 * s,
        c[0] * (-sech2 + (one - t0 * t0)),
        S::zero(),
        -c[0] * sech2,
    ];
    let mut dc = [S::zero(); 5];
    for k in 0..5 {
        dc[k] = c[3] * dv[k];
    }
    dc[3] = vs - v;
    (a, dc, c[3] * c[0] * sech2 * c[1], -c[3])
}

/// Headway at which `V(s) = speed`.
pub fn equilibrium_headway(c: &[f64], speed: f64) -> Result<f64> {
    let arg = speed / c[0] + (-c[2]).tanh();
    if !(arg > -1.0 && arg < 1.0) || c[1] <= 0.0 {
        return Err(Error::invalid("ovm parameters", format!("no equilibrium headway for speed {speed}")));
    }
    Ok((arg.atanh() + c[2] + c[4]) / c[1])
}

/// One follower with its leader and measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct OvmVehicle<S> {
    /// Leader positions at steps `0 .. n`.
    pub lead_pos: Vec<S>,
    pub lead_len: S,
    /// Measured follower positions at steps `1 .. n`.
    pub measured: Vec<S>,
    /// Initial `[position, speed]`.
    pub x0: [S; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvmProblem<S> {
    pub dt: S,
    pub vehicles: Vec<OvmVehicle<S>>,
}

impl<S: Scalar> OvmProblem<S> {
    pub fn new(dt: S, vehicles: Vec<OvmVehicle<S>>) -> Result<Self> {
        if !(dt > S::zero()) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        let first = vehicles.first().ok_or_else(|| Error::invalid("vehicles", "need at least one"))?;
        let n = first.measured.len();
        if n == 0 {
            return Err(Error::invalid("measured", "need at least one step"));
        }
        for v in &vehicles {
            if v.measured.len() != n {
                return Err(Error::dim("measured", n, v.measured.len()));
            }
            if v.lead_pos.len() != n + 1 {
                return Err(Error::dim("lead positions", n + 1, v.lead_pos.len()));
            }
        }
        Ok(Self { dt, vehicles })
    }

    pub fn x0(&self) -> Vec<S> {
        self.vehicles.iter().flat_map(|v| v.x0).collect()
    }

    pub fn loss(&self) -> LossSpec<S> {
        let meas: Arc<Vec<Vec<S>>> = Arc::new(self.vehicles.iter().map(|v| v.measured.clone()).collect());
        let m2 = meas.clone();
        LossSpec::summable(
            move |i, x: &[S]| {
                meas.iter()
                    .enumerate()
                    .map(|(k, m)| (x[2 * k] - m[i - 1]).powi(2))
                    .sum()
            },
            move |i, x: &[S]| {
                let mut g = vec![S::zero(); x.len()];
                for (k, m) in m2.iter().enumerate() {
                    g[2 * k] = S::of(2.0) * (x[2 * k] - m[i - 1]);
                }
                g
            },
        )
    }

    pub fn problem(&self, theta0: Vec<S>, bounds: Vec<(S, S)>) -> Problem<S> {
        Problem::new("ovm", Arc::new(self.clone()), self.loss(), self.x0(), theta0).with_bounds(bounds)
    }

    /// Follower positions `x_1 .. x_n` of every vehicle under `theta`.
    pub fn positions(&self, theta: &[S]) -> Result<Vec<Vec<S>>> {
        let n = self.n_steps();
        let mut states = vec![self.x0()];
        for i in 1..=n {
            let win = [states[i - 1].as_slice()];
            let ctx = StepContext { step: i, window: &win, theta };
            let next = self.step(&ctx, None, &[])?;
            states.push(next);
        }
        Ok((0..self.vehicles.len())
            .map(|k| states[1..].iter().map(|x| x[2 * k]).collect())
            .collect())
    }

    /// Root-mean-square position error over all vehicles and steps.
    pub fn rmse(&self, theta: &[S]) -> Result<S> {
        let pos = self.positions(theta)?;
        let mut acc = S::zero();
        let mut count = 0usize;
        for (p, v) in pos.iter().zip(&self.vehicles) {
            for (a, b) in p.iter().zip(&v.measured) {
                acc += (*a - *b) * (*a - *b);
                count += 1;
            }
        }
        Ok((acc / S::of(count as f64)).sqrt())
    }
}

impl<S: Scalar> StepModel<S> for OvmProblem<S> {
    fn n_steps(&self) -> usize {
        self.vehicles[0].measured.len()
    }
    fn state_dim(&self) -> usize {
        2 * self.vehicles.len()
    }
    fn param_dim(&self) -> usize {
        N_PARAMS * self.vehicles.len()
    }
    fn has_score(&self) -> bool {
        false
    }
    fn has_pathwise(&self) -> bool {
        true
    }

    fn step(&self, ctx: &StepContext<'_, S>, _: Option<&[S]>, _: &[S]) -> Result<Vec<S>> {
        let prev = ctx.prev();
        let mut out = Vec::with_capacity(prev.len());
        for (k, veh) in self.vehicles.iter().enumerate() {
            let (x, v) = (prev[2 * k], prev[2 * k + 1]);
            let s = veh.lead_pos[ctx.step - 1] - x - veh.lead_len;
            let (a, ..) = ovm_accel(&ctx.theta[N_PARAMS * k..N_PARAMS * (k + 1)], s, v);
            out.push(x + self.dt * v);
            out.push(v + self.dt * a);
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("ovm state", Some(ctx.step)));
        }
        Ok(out)
    }

    fn step_vjp(&self, ctx: &StepContext<'_, S>, _: Option<&[S]>, _: &[S], cot: &[S]) -> Result<StepVjp<S>> {
        let prev = ctx.prev();
        let mut d_theta = vec![S::zero(); self.param_dim()];
        let mut d_x = vec![S::zero(); prev.len()];
        for (k, veh) in self.vehicles.iter().enumerate() {
            let (x, v) = (prev[2 * k], prev[2 * k + 1]);
            let s = veh.lead_pos[ctx.step - 1] - x - veh.lead_len;
            let (_, dc, ds, dv) = ovm_accel(&ctx.theta[N_PARAMS * k..N_PARAMS * (k + 1)], s, v);
            let (lx, lv) = (cot[2 * k], cot[2 * k + 1]);
            for j in 0..N_PARAMS {
                d_theta[N_PARAMS * k + j] = lv * self.dt * dc[j];
            }
            d_x[2 * k] = lx - lv * self.dt * ds;
            d_x[2 * k + 1] = lx * self.dt + lv * (S::one() + self.dt * dv);
        }
        Ok(StepVjp {
            d_theta,
            d_window: vec![d_x],
            nondifferentiable: false,
        })
    }
}

/// One row of an OVM trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvmRow {
    pub t: f64,
    pub lead_pos: f64,
    pub lead_speed: f64,
    pub follower_pos: f64,
    pub follower_speed: f64,
}

/// A leader/follower recording sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OvmData {
    pub rows: Vec<OvmRow>,
}

impl OvmData {
    pub fn dt(&self) -> Result<f64> {
        if self.rows.len() < 2 {
            return Err(Error::invalid("ovm data", "need at least two rows"));
        }
        let dt = self.rows[1].t - self.rows[0].t;
        if !(dt > 0.0) {
            return Err(Error::invalid("t", "must be increasing"));
        }
        for w in self.rows.windows(2) {
            if ((w[1].t - w[0].t) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::invalid("t", "must be uniformly spaced"));
            }
        }
        Ok(dt)
    }

    pub fn validate(&self) -> Result<()> {
        self.dt()?;
        for (i, r) in self.rows.iter().enumerate() {
            let vals = [r.t, r.lead_pos, r.lead_speed, r.follower_pos, r.follower_speed];
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite("ovm data row", Some(i)));
            }
        }
        Ok(())
    }

    pub fn to_vehicle<S: Scalar>(&self, lead_len: f64) -> OvmVehicle<S> {
        OvmVehicle {
            lead_pos: self.rows.iter().map(|r| S::of(r.lead_pos)).collect(),
            lead_len: S::of(lead_len),
            measured: self.rows[1..].iter().map(|r| S::of(r.follower_pos)).collect(),
            x0: [S::of(self.rows[0].follower_pos), S::of(self.rows[0].follower_speed)],
        }
    }

    /// Spread of the follower positions, used to scale error gates.
    pub fn position_range(&self) -> f64 {
        let (lo, hi) = self
            .rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.follower_pos), hi.max(r.follower_pos)));
        hi - lo
    }

    pub fn read_csv(reader: impl io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<OvmRow>, _>>()?;
        let data = Self { rows };
        data.validate()?;
        Ok(data)
    }

    pub fn write_csv(&self, writer: impl io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Settings for a synthetic recording: a leader cruising at constant speed
/// with one braking pulse, followed by an OVM driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OvmSynthesis {
    pub n_steps: usize,
    pub dt: f64,
    pub cruise_speed: f64,
    pub min_speed: f64,
    /// Braking and recovery rate, m/s².
    pub decel: f64,
    pub pulse_start: f64,
    pub hold: f64,
    pub lead_len: f64,
    /// Standard deviation of Gaussian noise added to measured follower positions.
    pub noise_sd: f64,
    pub true_params: [f64; 5],
}

impl Default for OvmSynthesis {
    fn default() -> Self {
        Self {
            n_steps: 300,
            dt: 0.1,
            cruise_speed: 8.0,
            min_speed: 3.0,
            decel: 2.0,
            pulse_start: 8.0,
            hold: 3.0,
            lead_len: 5.0,
            noise_sd: 0.0,
            true_params: [10.0, 0.1, 1.5, 0.8, 0.5],
        }
    }
}

/// Generates a recording; the seed jitters the pulse timing and depth and
/// drives the measurement noise.
pub fn synthesize_ovm_data(cfg: &OvmSynthesis, seed: u64) -> Result<OvmData> {
    if cfg.n_steps < 10 {
        return Err(Error::invalid("n_steps", format!("horizon must be at least 10 steps, got {}", cfg.n_steps)));
    }
    if !(cfg.dt > 0.0) || !(cfg.decel > 0.0) {
        return Err(Error::invalid("ovm synthesis", "dt and decel must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = cfg.pulse_start + rng.gen_range(-1.0..1.0);
    let floor = (cfg.min_speed + rng.gen_range(-0.5..0.5)).max(0.0);
    let brake_end = start + (cfg.cruise_speed - floor).max(0.0) / cfg.decel;
    let recover = brake_end + cfg.hold;
    let speed_at = |t: f64| {
        if t < start {
            cfg.cruise_speed
        } else if t < brake_end {
            cfg.cruise_speed - cfg.decel * (t - start)
        } else if t < recover {
            floor
        } else {
            (floor + cfg.decel * (t - recover)).min(cfg.cruise_speed)
        }
    };

    let c = cfg.true_params;
    let gap = equilibrium_headway(&c, cfg.cruise_speed)?;
    let n = cfg.n_steps;
    let mut lead_pos = vec![gap + cfg.lead_len];
    let mut lead_speed = vec![cfg.cruise_speed];
    for i in 1..=n {
        lead_pos.push(lead_pos[i - 1] + cfg.dt * lead_speed[i - 1]);
        lead_speed.push(speed_at(i as f64 * cfg.dt));
    }
    let vehicle = OvmVehicle {
        lead_pos: lead_pos.clone(),
        lead_len: cfg.lead_len,
        measured: vec![0.0; n],
        x0: [0.0, cfg.cruise_speed],
    };
    let model = OvmProblem::new(cfg.dt, vec![vehicle])?;
    let mut states = vec![model.x0()];
    for i in 1..=n {
        let win = [states[i - 1].as_slice()];
        let ctx = StepContext { step: i, window: &win, theta: &c[..] };
        let next = model.step(&ctx, None, &[])?;
        states.push(next);
    }
    let rows = (0..=n)
        .map(|i| {
            let noise = if i > 0 && cfg.noise_sd > 0.0 {
                cfg.noise_sd * crate::rng::standard_normal::<f64>(&mut rng)
            } else {
                0.0
            };
            OvmRow {
                t: i as f64 * cfg.dt,
                lead_pos: lead_pos[i],
                lead_speed: lead_speed[i],
                follower_pos: states[i][0] + noise,
                follower_speed: states[i][1],
            }
        })
        .collect();
    Ok(OvmData { rows })
}

/// `n_vehicles` independent synthetic followers in one model, for cost scaling.
pub fn fleet<S: Scalar>(cfg: &OvmSynthesis, n_vehicles: usize, seed: u64) -> Result<OvmProblem<S>> {
    let vehicles = (0..n_vehicles as u64)
        .map(|k| synthesize_ovm_data(cfg, derive_seed(seed, k)).map(|d| d.to_vehicle(cfg.lead_len)))
        .collect::<Result<Vec<_>>>()?;
    OvmProblem::new(S::of(cfg.dt), vehicles)
}

/// Wall-clock cost of one objective, one adjoint gradient and one central
/// finite-difference gradient for a fleet with `m` parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostRow {
    pub m: usize,
    pub t_objective: f64,
    pub t_adjoint: f64,
    pub t_fd: f64,
}

fn min_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times fleets of `vehicle_counts[j]` followers; each figure is the minimum over `repeats`.
pub fn cost_scaling(cfg: &OvmSynthesis, vehicle_counts: &[usize], repeats: usize, seed: u64) -> Result<Vec<CostRow>> {
    vehicle_counts
        .iter()
        .map(|&n| {
            let model = fleet::<f64>(cfg, n, seed)?;
            let loss = model.loss();
            let x0 = model.x0();
            let theta: Vec<f64> = (0..n).flat_map(|_| cfg.true_params.map(|c| c * 1.1)).collect();
            let t_objective = min_time(repeats, || deterministic_objective(&model, &loss, &theta, &x0).map(drop))?;
            let t_adjoint = min_time(repeats, || deterministic_adjoint(&model, &loss, &theta, &x0).map(drop))?;
            let t_fd = min_time(repeats.div_ceil(4), || {
                finite_difference_gradient(|t| deterministic_objective(&model, &loss, t, &x0), &theta, 1e-6).map(drop)
            })?;
            Ok(CostRow {
                m: model.param_dim(),
                t_objective,
                t_adjoint,
                t_fd,
            })
        })
        .collect()
}
