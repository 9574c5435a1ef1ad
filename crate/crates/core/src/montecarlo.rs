//! Euler–Maruyama simulation of the killed closed loop and empirical
//! survival curves.
//!
//! Each trial draws from its own ChaCha stream selected by the trial index,
//! so results do not depend on how trials are scheduled. Exit is tested at
//! the discrete steps only.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::filter::{FilterError, FilterSpec};
use crate::grid::{interpolate, GridError};
use crate::semigroup::PolicyTable;
use crate::spectral::EigenResult;
use crate::systems::SystemModel;

pub const Z95: f64 = 1.959963984540054;
pub const Z99: f64 = 2.5758293035489;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("initial state is outside the safe set")]
    InitialStateOutside,
    #[error("state has {got} entries, expected {expected}")]
    StateLength { got: usize, expected: usize },
    #[error("fewer than 10 positive survival samples in the fit window")]
    InsufficientData,
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reference law fed to the safety filter or applied directly.
#[derive(Clone)]
pub enum Reference {
    Constant(Vec<f64>),
    /// Counter-clockwise circle tracking for the bicycle model.
    CircleTracking(CircleTracking),
    Custom(Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Constant(u) => f.debug_tuple("Constant").field(u).finish(),
            Reference::CircleTracking(c) => f.debug_tuple("CircleTracking").field(c).finish(),
            Reference::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Heading and speed loop for `θ' = v u₀`, `v' = u₁` that steers toward a
/// circle of radius `radius` about the origin.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleTracking {
    pub radius: f64,
    pub speed: f64,
    pub k_radial: f64,
    pub k_heading: f64,
    pub k_speed: f64,
}

impl Default for CircleTracking {
    fn default() -> Self {
        CircleTracking { radius: 1.5, speed: 1.0, k_radial: 1.0, k_heading: 1.0, k_speed: 1.0 }
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl CircleTracking {
    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        let (px, py, th, v) = (x[0], x[1], x[2], x[3]);
        let r = px.hypot(py);
        let phi = py.atan2(px);
        let desired = phi + 0.5 * PI + (self.k_radial * (r - self.radius)).atan();
        let steer = 1.0 / self.radius + self.k_heading * wrap_angle(desired - th);
        vec![steer, self.k_speed * (self.speed - v)]
    }
}

impl Reference {
    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            Reference::Constant(u) => u.clone(),
            Reference::CircleTracking(c) => c.input(x),
            Reference::Custom(f) => f(t, x),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Controller {
    FixedPolicy(PolicyTable),
    ScbfQp { filter: Box<FilterSpec>, reference: Reference },
    OpenLoop(Vec<f64>),
    /// The reference law without filtering.
    Unfiltered(Reference),
}

impl Controller {
    fn input(&self, sys: &SystemModel, t: f64, x: &[f64]) -> Result<Vec<f64>, SimError> {
        let mut u = match self {
            Controller::FixedPolicy(p) => p.interpolate(x)?,
            Controller::ScbfQp { filter, reference } => filter.filter_input(x, &reference.eval(t, x))?.u,
            Controller::OpenLoop(u) => u.clone(),
            Controller::Unfiltered(r) => r.eval(t, x),
        };
        sys.clamp_input(&mut u);
        Ok(u)
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub trials: usize,
    pub seed: u64,
    /// Spacing of recorded samples; rounded to a whole number of steps.
    pub sample_dt: f64,
    pub controller: Controller,
}

impl SimConfig {
    pub fn new(controller: Controller) -> Self {
        SimConfig { dt: 1e-3, t_end: 1.0, trials: 1000, seed: 0, sample_dt: 0.01, controller }
    }

    fn validate(&self) -> Result<(usize, usize), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(SimError::InvalidConfig(format!("t_end must be at least dt, got {}", self.t_end)));
        }
        if self.trials == 0 {
            return Err(SimError::InvalidConfig("trials must be at least 1".into()));
        }
        let steps = (self.t_end / self.dt).round() as usize;
        let stride = ((self.sample_dt / self.dt).round() as usize).max(1);
        Ok((steps, stride))
    }
}

/// Recorded samples of one trial. `states` and `inputs` are row-major by
/// sample. Once `alive` turns false it stays false and the state is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_x: usize,
    pub n_u: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub inputs: Vec<f64>,
    pub alive: Vec<bool>,
    /// Step at which the state first left the safe set.
    pub killed_at: Option<usize>,
}

impl Trajectory {
    pub fn state(&self, sample: usize) -> &[f64] {
        &self.states[sample * self.n_x..(sample + 1) * self.n_x]
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Runs one trial; `record` receives `(step, t, x, u, alive)` at every
/// recorded step and at the kill step.
fn run_trial(
    sys: &SystemModel,
    cfg: &SimConfig,
    x0: &[f64],
    trial: usize,
    steps: usize,
    mut record: impl FnMut(usize, f64, &[f64], &[f64], bool),
    stride: usize,
) -> Result<(Option<usize>, Vec<f64>), SimError> {
    let (nx, nw) = (sys.n_x(), sys.n_w());
    let mut rng = trial_rng(cfg.seed, trial);
    let mut x = x0.to_vec();
    let mut f = vec![0.0; nx];
    let mut sig = vec![0.0; nx * nw];
    let mut xi = vec![0.0; nw];
    let sq = cfg.dt.sqrt();
    let mut u = cfg.controller.input(sys, 0.0, &x)?;
    for step in 0..steps {
        let t = step as f64 * cfg.dt;
        if step > 0 {
            u = cfg.controller.input(sys, t, &x)?;
        }
        if step % stride == 0 {
            record(step, t, &x, &u, true);
        }
        sys.drift(&x, &u, &mut f);
        sys.diffusion(&x, &u, &mut sig);
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..nx {
            let noise: f64 = (0..nw).map(|j| sig[i * nw + j] * xi[j]).sum();
            x[i] += f[i] * cfg.dt + sq * noise;
        }
        sys.grid().wrap(&mut x);
        if !sys.in_safe_set(&x) {
            return Ok((Some(step + 1), x));
        }
    }
    if steps % stride == 0 {
        record(steps, steps as f64 * cfg.dt, &x, &cfg.controller.input(sys, steps as f64 * cfg.dt, &x)?, true);
    }
    Ok((None, x))
}

fn check_x0(sys: &SystemModel, x0: &[f64]) -> Result<Vec<f64>, SimError> {
    if x0.len() != sys.n_x() {
        return Err(SimError::StateLength { got: x0.len(), expected: sys.n_x() });
    }
    let mut x = x0.to_vec();
    sys.grid().wrap(&mut x);
    if !sys.in_safe_set(&x) {
        return Err(SimError::InitialStateOutside);
    }
    Ok(x)
}

/// Simulates trial `trial` of the configuration.
pub fn simulate(sys: &SystemModel, cfg: &SimConfig, x0: &[f64], trial: usize) -> Result<Trajectory, SimError> {
    let (steps, stride) = cfg.validate()?;
    let x0 = check_x0(sys, x0)?;
    let mut traj = Trajectory {
        n_x: sys.n_x(),
        n_u: sys.n_u(),
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        alive: Vec::new(),
        killed_at: None,
    };
    let (killed, last_x) = run_trial(
        sys,
        cfg,
        &x0,
        trial,
        steps,
        |_, t, x, u, alive| {
            traj.times.push(t);
            traj.states.extend_from_slice(x);
            traj.inputs.extend_from_slice(u);
            traj.alive.push(alive);
        },
        stride,
    )?;
    traj.killed_at = killed;
    // the state stays frozen where it left the safe set
    let last_u = traj.inputs[traj.inputs.len() - sys.n_u()..].to_vec();
    for j in traj.times.len()..steps / stride + 1 {
        traj.times.push((j * stride) as f64 * cfg.dt);
        traj.states.extend_from_slice(&last_x);
        traj.inputs.extend_from_slice(&last_u);
        traj.alive.push(false);
    }
    Ok(traj)
}

/// Survival-curve normalization `ψ(x₀)/ψ_max` and decay rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoreticalBound {
    pub ratio: f64,
    pub gamma: f64,
}

impl TheoreticalBound {
    pub fn from_eigen(result: &EigenResult, x0: &[f64]) -> Result<Self, SimError> {
        let ratio = interpolate(&result.psi, x0)? / result.psi.max();
        Ok(TheoreticalBound { ratio, gamma: result.gamma })
    }

    pub fn from_filter(filter: &FilterSpec, x0: &[f64]) -> Result<Self, SimError> {
        let ratio = interpolate(filter.psi(), x0)? / filter.psi().max();
        Ok(TheoreticalBound { ratio, gamma: filter.gamma() })
    }

    pub fn at(&self, t: f64) -> f64 {
        (self.ratio * (-self.gamma * t).exp()).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyCurve {
    pub times: Vec<f64>,
    pub survivors: Vec<usize>,
    pub trials: usize,
    pub survival_fraction: Vec<f64>,
    pub wilson_ci_low: Vec<f64>,
    pub wilson_ci_high: Vec<f64>,
    pub theoretical_bound: Option<Vec<f64>>,
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

impl SafetyCurve {
    fn from_counts(times: Vec<f64>, survivors: Vec<usize>, trials: usize, bound: Option<TheoreticalBound>) -> Self {
        let survival_fraction = survivors.iter().map(|&k| k as f64 / trials as f64).collect();
        let (wilson_ci_low, wilson_ci_high) = survivors.iter().map(|&k| wilson_interval(k, trials, Z95)).unzip();
        let theoretical_bound = bound.map(|b| times.iter().map(|&t| b.at(t)).collect());
        SafetyCurve { times, survivors, trials, survival_fraction, wilson_ci_low, wilson_ci_high, theoretical_bound }
    }

    /// Wilson interval at sample `j` for another confidence level.
    pub fn interval(&self, j: usize, z: f64) -> (f64, f64) {
        wilson_interval(self.survivors[j], self.trials, z)
    }

    pub fn final_fraction(&self) -> f64 {
        *self.survival_fraction.last().unwrap_or(&1.0)
    }
}

/// Survival fraction of all trials at every sample time.
pub fn estimate_safety_curve(
    sys: &SystemModel,
    cfg: &SimConfig,
    x0: &[f64],
    bound: Option<TheoreticalBound>,
) -> Result<SafetyCurve, SimError> {
    let (steps, stride) = cfg.validate()?;
    let x0 = check_x0(sys, x0)?;
    let kills: Vec<Option<usize>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(sys, cfg, &x0, trial, steps, |_, _, _, _, _| {}, stride).map(|r| r.0))
        .collect::<Result<_, _>>()?;
    let samples = steps / stride + 1;
    let mut survivors = vec![0usize; samples];
    for k in &kills {
        // alive at sample j iff the kill step is later than j*stride
        let alive_samples = match k {
            None => samples,
            Some(step) => ((step - 1) / stride + 1).min(samples),
        };
        for s in survivors.iter_mut().take(alive_samples) {
            *s += 1;
        }
    }
    let times = (0..samples).map(|j| (j * stride) as f64 * cfg.dt).collect();
    Ok(SafetyCurve::from_counts(times, survivors, cfg.trials, bound))
}

/// Negated least-squares slope of `ln S(t)` over the last `window` fraction
/// of the time span.
pub fn fit_decay_rate(curve: &SafetyCurve, window: f64) -> Result<f64, SimError> {
    let (Some(&t0), Some(&t1)) = (curve.times.first(), curve.times.last()) else {
        return Err(SimError::InsufficientData);
    };
    let start = t1 - window.clamp(0.0, 1.0) * (t1 - t0);
    let pts: Vec<(f64, f64)> = curve
        .times
        .iter()
        .zip(&curve.survival_fraction)
        .filter(|(&t, &s)| t >= start - 1e-12 && s > 0.0)
        .map(|(&t, &s)| (t, s.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(SimError::InsufficientData);
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    if sxx <= 0.0 {
        return Err(SimError::InsufficientData);
    }
    Ok(-sxy / sxx)
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut out: W) -> Result<(), SimError> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.n_x).map(|i| format!("x{i}")));
    header.extend((1..=traj.n_u).map(|i| format!("u{i}")));
    header.push("alive".into());
    writeln!(out, "{}", header.join(","))?;
    for j in 0..traj.times.len() {
        let mut row = vec![format!("{:e}", traj.times[j])];
        row.extend(traj.state(j).iter().map(|v| format!("{v:e}")));
        row.extend(traj.inputs[j * traj.n_u..(j + 1) * traj.n_u].iter().map(|v| format!("{v:e}")));
        row.push(if traj.alive[j] { "1" } else { "0" }.into());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(curve: &SafetyCurve, mut out: W) -> Result<(), SimError> {
    writeln!(out, "t,survivors,survival,ci_low,ci_high,bound")?;
    for j in 0..curve.times.len() {
        let bound = curve.theoretical_bound.as_ref().map_or(String::new(), |b| format!("{:e}", b[j]));
        writeln!(
            out,
            "{:e},{},{:e},{:e},{:e},{}",
            curve.times[j],
            curve.survivors[j],
            curve.survival_fraction[j],
            curve.wilson_ci_low[j],
            curve.wilson_ci_high[j],
            bound
        )?;
    }
    Ok(())
}
