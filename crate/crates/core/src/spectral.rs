//! Dominant eigenpair of the killed semigroup by power iteration.
//!
//! For a fixed policy the iterate is `ψ ← T_t ψ / ‖T_t ψ‖∞`; the norm
//! `r = ‖T_t ψ‖∞` gives the decay rate `γ = −ln(r)/t`. Power-policy
//! iteration either folds the policy improvement into the propagation
//! (`∂τ b = max_u 𝒜^u b`) or alternates argmax and fixed-policy propagation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{interpolate, sup_distance, sup_norm, GridError, GridSpec, ScalarField};
use crate::semigroup::{Discretization, OptimalStepper, PolicyTable, PropagationConfig, SemigroupError};
use crate::systems::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub gamma: f64,
    pub psi: ScalarField,
    pub policy: PolicyTable,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub horizon: f64,
}

impl EigenResult {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |r| r.residual)
    }

    /// Survival floor `r = e^{−γt}` over the propagation horizon.
    pub fn ratio(&self) -> f64 {
        (-self.gamma * self.horizon).exp()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("propagated field collapsed to zero at iteration {iteration}")]
    Collapse { iteration: usize },
    #[error("no convergence after {} iterations (residual {:e})", .0.iterations(), .0.final_residual())]
    NotConverged(Box<EigenResult>),
    #[error("invalid initial guess: {0}")]
    InvalidInit(String),
    #[error("tolerance must be positive and max_iter at least 1")]
    InvalidTolerance,
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl SpectralError {
    /// The partial result carried by `NotConverged`.
    pub fn partial(&self) -> Option<&EigenResult> {
        match self {
            SpectralError::NotConverged(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyUpdate {
    /// Optimal input chosen inside every time step of the propagation.
    #[default]
    Accelerated,
    /// Argmax policy against ψ, then fixed-policy propagation.
    TwoStep,
}

/// Product of per-dimension bumps `max(0, 1 − (2(xᵢ−cᵢ)/wᵢ)²)` centered in
/// the box; periodic dimensions contribute a factor of one.
pub fn default_init(spec: &GridSpec) -> ScalarField {
    let (lo, hi) = (spec.lower().to_vec(), spec.upper().to_vec());
    let periodic: Vec<bool> = (0..spec.dims()).map(|i| spec.is_periodic(i)).collect();
    ScalarField::from_fn(spec.clone(), |x| {
        x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                if periodic[i] {
                    1.0
                } else {
                    let c = 0.5 * (lo[i] + hi[i]);
                    let w = hi[i] - lo[i];
                    let s = 2.0 * (xi - c) / w;
                    (1.0 - s * s).max(0.0)
                }
            })
            .product()
    })
    .expect("bump values are finite")
}

fn check_inputs(init: &ScalarField, sys: &SystemModel, tol: f64, max_iter: usize) -> Result<(), SpectralError> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(SpectralError::InvalidTolerance);
    }
    if init.spec() != sys.grid() {
        return Err(GridError::GridMismatch.into());
    }
    if init.values().iter().any(|&v| v < 0.0) {
        return Err(SpectralError::InvalidInit("initial guess has negative values".into()));
    }
    Ok(())
}

fn normalize(field: &ScalarField, iteration: usize) -> Result<(ScalarField, f64), SpectralError> {
    let r = sup_norm(field);
    if !(r > f64::MIN_POSITIVE) || !r.is_finite() {
        return Err(SpectralError::Collapse { iteration });
    }
    Ok((field.scaled(1.0 / r), r))
}

/// Drives the outer loop; `step(ψ, iteration)` returns `T_t ψ` and the policy
/// to report for that step.
fn iterate<F>(
    disc: &Discretization,
    init: &ScalarField,
    cfg: &PropagationConfig,
    tol: f64,
    max_iter: usize,
    mut step: F,
) -> Result<EigenResult, SpectralError>
where
    F: FnMut(&ScalarField) -> Result<(ScalarField, PolicyTable), SpectralError>,
{
    let masked = disc.mask(init);
    let (mut psi, _) =
        normalize(&masked, 0).map_err(|_| SpectralError::InvalidInit("initial guess vanishes on live nodes".into()))?;
    let t = cfg.horizon;
    if !(t > 0.0) {
        return Err(SemigroupError::InvalidConfig("power iteration needs a positive horizon".into()).into());
    }
    let mut history = Vec::new();
    let mut gamma = f64::NAN;
    let mut policy = None;
    for iteration in 1..=max_iter {
        let (propagated, pol) = step(&psi)?;
        let (next, r) = normalize(&propagated, iteration)?;
        gamma = -r.ln() / t + 0.0;
        let residual = sup_distance(&next, &psi)?;
        history.push(IterationRecord { iteration, residual, gamma });
        psi = next;
        policy = Some(pol);
        if residual < tol {
            return Ok(EigenResult { gamma, psi, policy: policy.unwrap(), history, converged: true, horizon: t });
        }
    }
    let partial = EigenResult { gamma, psi, policy: policy.unwrap(), history, converged: false, horizon: t };
    Err(SpectralError::NotConverged(Box::new(partial)))
}

/// Power iteration for a fixed policy.
pub fn power_iteration(
    sys: &SystemModel,
    policy: &PolicyTable,
    cfg: &PropagationConfig,
    init: &ScalarField,
    tol: f64,
    max_iter: usize,
) -> Result<EigenResult, SpectralError> {
    check_inputs(init, sys, tol, max_iter)?;
    let disc = Discretization::new(sys)?;
    iterate(&disc, init, cfg, tol, max_iter, |psi| Ok((disc.propagate(psi, policy, cfg)?, policy.clone())))
}

/// Power-policy iteration with the accelerated update.
pub fn power_policy_iteration(
    sys: &SystemModel,
    cfg: &PropagationConfig,
    init_psi: &ScalarField,
    init_policy: &PolicyTable,
    tol: f64,
    max_iter: usize,
) -> Result<EigenResult, SpectralError> {
    power_policy_iteration_with(sys, cfg, init_psi, init_policy, tol, max_iter, PolicyUpdate::Accelerated)
}

pub fn power_policy_iteration_with(
    sys: &SystemModel,
    cfg: &PropagationConfig,
    init_psi: &ScalarField,
    init_policy: &PolicyTable,
    tol: f64,
    max_iter: usize,
    update: PolicyUpdate,
) -> Result<EigenResult, SpectralError> {
    check_inputs(init_psi, sys, tol, max_iter)?;
    if init_policy.spec() != sys.grid() || init_policy.n_u() != sys.n_u() {
        return Err(SemigroupError::PolicyMismatch("initial policy does not match the system".into()).into());
    }
    let disc = Discretization::new(sys)?;
    let stepper = OptimalStepper::new(&disc, cfg)?;
    let mut current = init_policy.clone();
    let finish = |res: Result<EigenResult, SpectralError>| -> Result<EigenResult, SpectralError> {
        let fix = |mut r: EigenResult| {
            if update == PolicyUpdate::Accelerated {
                r.policy = stepper.argmax_policy(&r.psi);
            }
            r
        };
        match res {
            Ok(r) => Ok(fix(r)),
            Err(SpectralError::NotConverged(r)) => Err(SpectralError::NotConverged(Box::new(fix(*r)))),
            Err(e) => Err(e),
        }
    };
    let res = iterate(&disc, init_psi, cfg, tol, max_iter, |psi| match update {
        PolicyUpdate::Accelerated => Ok((stepper.propagate(psi, cfg)?, current.clone())),
        PolicyUpdate::TwoStep => {
            current = stepper.improve_policy(psi, &current);
            Ok((disc.propagate(psi, &current, cfg)?, current.clone()))
        }
    });
    finish(res)
}

/// `‖T_t ψ − e^{−γt} ψ‖∞` for the reported policy.
pub fn eigen_residual(result: &EigenResult, sys: &SystemModel, cfg: &PropagationConfig) -> Result<f64, SpectralError> {
    let disc = Discretization::new(sys)?;
    let propagated = disc.propagate(&result.psi, &result.policy, cfg)?;
    let scaled = result.psi.scaled((-result.gamma * cfg.horizon).exp());
    Ok(sup_distance(&propagated, &scaled)?)
}

/// Decay rate `−ln‖T_t ψ‖∞ / t` of the reported ψ under its policy.
pub fn recompute_gamma(result: &EigenResult, sys: &SystemModel, cfg: &PropagationConfig) -> Result<f64, SpectralError> {
    let disc = Discretization::new(sys)?;
    let propagated = disc.propagate(&result.psi, &result.policy, cfg)?;
    let r = sup_norm(&propagated);
    if !(r > 0.0) {
        return Err(SpectralError::Collapse { iteration: 0 });
    }
    Ok(-r.ln() / cfg.horizon)
}

/// Multilinear resampling of a field onto another grid over the same box.
pub fn resample(field: &ScalarField, target: &GridSpec) -> Result<ScalarField, SpectralError> {
    let src = field.spec();
    if src.lower() != target.lower() || src.upper() != target.upper() || src.dims() != target.dims() {
        return Err(GridError::GridMismatch.into());
    }
    let mut x = vec![0.0; target.dims()];
    let mut values = Vec::with_capacity(target.len());
    for k in 0..target.len() {
        target.node_coords(k, &mut x);
        values.push(interpolate(field, &x)?);
    }
    Ok(ScalarField::new(target.clone(), values)?)
}

pub fn resample_policy(
    policy: &PolicyTable,
    sys: &SystemModel,
) -> Result<PolicyTable, SpectralError> {
    let channels = (0..policy.n_u())
        .map(|k| resample(&policy.channel(k), sys.grid()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PolicyTable::from_channels(sys, &channels)?)
}

/// Roughly half the nodes per dimension, keeping at least five.
pub fn coarsen_counts(spec: &GridSpec) -> Vec<usize> {
    (0..spec.dims())
        .map(|i| {
            let n = spec.counts()[i];
            let c = if spec.is_periodic(i) { n / 2 } else { (n - 1) / 2 + 1 };
            c.max(5).min(n)
        })
        .collect()
}

/// Power-policy iteration on a coarsened grid, interpolated up as the warm
/// start of the full-resolution solve.
pub fn coarse_to_fine(
    sys: &SystemModel,
    cfg: &PropagationConfig,
    tol: f64,
    max_iter: usize,
    update: PolicyUpdate,
) -> Result<EigenResult, SpectralError> {
    let coarse_sys = sys.with_resolution(&coarsen_counts(sys.grid())).map_err(|e| {
        SpectralError::InvalidInit(format!("cannot coarsen grid: {e}"))
    })?;
    let coarse = match power_policy_iteration_with(
        &coarse_sys,
        cfg,
        &default_init(coarse_sys.grid()),
        &PolicyTable::centered(&coarse_sys),
        tol,
        max_iter,
        update,
    ) {
        Ok(r) => r,
        Err(SpectralError::NotConverged(r)) => *r,
        Err(e) => return Err(e),
    };
    let mut init = resample(&coarse.psi, sys.grid())?;
    if init.values().iter().all(|&v| v <= 0.0) {
        init = default_init(sys.grid());
    }
    let policy = resample_policy(&coarse.policy, sys)?;
    power_policy_iteration_with(sys, cfg, &init, &policy, tol, max_iter, update)
}
