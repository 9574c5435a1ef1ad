//! Minimally invasive safety filter.
//!
//! Given ψ and a decay rate γ, the filter returns the input closest to the
//! reference in a weighted two-norm among inputs in the box satisfying
//! `𝒜^u ψ(x) + γψ(x) ≥ 0`. Derivatives of ψ come from nodal differences
//! interpolated to `x`, so the constraint carries a small slack.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{gradient_at, hessian_at, interpolate, GridError, ScalarField};
use crate::semigroup::PolicyTable;
use crate::spectral::EigenResult;
use crate::systems::SystemModel;

/// Tolerated constraint violation from interpolation noise.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

const NONAFFINE_GRID: usize = 15;
const REFINE_ITERS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("decay rate {gamma} is below the eigenvalue {gamma_pi}")]
    GammaBelowEigen { gamma: f64, gamma_pi: f64 },
    #[error("weights must be positive and finite, one per input")]
    InvalidWeight,
    #[error("state is outside the safe set")]
    OutsideSafeSet,
    #[error("input has {got} entries, expected {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("field or policy does not match the system grid")]
    Mismatch,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Unmodified,
    Modified,
    Backup,
    InfeasibleFallback,
}

impl FilterStatus {
    pub fn name(self) -> &'static str {
        match self {
            FilterStatus::Unmodified => "unmodified",
            FilterStatus::Modified => "modified",
            FilterStatus::Backup => "backup",
            FilterStatus::InfeasibleFallback => "infeasible_fallback",
        }
    }
}

/// `𝒜^u ψ(x) + γψ(x) = a0 + a_lin·u + uᵀ a_quad u`. When `exact` is false
/// the system is not of this form and the coefficients are a linearization
/// at the center of the input box.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorCoefficients {
    pub a0: f64,
    pub a_lin: Vec<f64>,
    pub a_quad: Option<Vec<f64>>,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub u: Vec<f64>,
    pub status: FilterStatus,
    /// Constraint value at the returned input.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct FilterSpec {
    sys: SystemModel,
    psi: ScalarField,
    backup: PolicyTable,
    gamma: f64,
    gamma_pi: f64,
    weight: Vec<f64>,
}

/// Local derivatives of ψ at a state.
struct Jet {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl FilterSpec {
    /// Filter built on a synthesized eigenpair; `weight` defaults to ones.
    pub fn new(result: &EigenResult, sys: &SystemModel, gamma: f64, weight: Option<Vec<f64>>) -> Result<Self, FilterError> {
        Self::from_parts(sys, result.psi.clone(), result.policy.clone(), result.gamma, gamma, weight)
    }

    pub fn from_parts(
        sys: &SystemModel,
        psi: ScalarField,
        backup: PolicyTable,
        gamma_pi: f64,
        gamma: f64,
        weight: Option<Vec<f64>>,
    ) -> Result<Self, FilterError> {
        if !(gamma >= gamma_pi) || !gamma.is_finite() {
            return Err(FilterError::GammaBelowEigen { gamma, gamma_pi });
        }
        if psi.spec() != sys.grid() || backup.spec() != sys.grid() || backup.n_u() != sys.n_u() {
            return Err(FilterError::Mismatch);
        }
        let weight = weight.unwrap_or_else(|| vec![1.0; sys.n_u()]);
        if weight.len() != sys.n_u() || weight.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(FilterError::InvalidWeight);
        }
        Ok(FilterSpec { sys: sys.clone(), psi, backup, gamma, gamma_pi, weight })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gamma_pi(&self) -> f64 {
        self.gamma_pi
    }

    pub fn psi(&self) -> &ScalarField {
        &self.psi
    }

    pub fn backup(&self) -> &PolicyTable {
        &self.backup
    }

    pub fn system(&self) -> &SystemModel {
        &self.sys
    }

    /// Same filter with another decay rate.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, FilterError> {
        if !(gamma >= self.gamma_pi) || !gamma.is_finite() {
            return Err(FilterError::GammaBelowEigen { gamma, gamma_pi: self.gamma_pi });
        }
        Ok(FilterSpec { gamma, ..self.clone() })
    }

    fn jet(&self, x: &[f64]) -> Result<Jet, FilterError> {
        if x.len() != self.sys.n_x() {
            return Err(FilterError::InputLength { got: x.len(), expected: self.sys.n_x() });
        }
        if !self.sys.in_safe_set(x) {
            return Err(FilterError::OutsideSafeSet);
        }
        Ok(Jet { value: interpolate(&self.psi, x)?, grad: gradient_at(&self.psi, x)?, hess: hessian_at(&self.psi, x)? })
    }

    /// Constraint value `𝒜^u ψ(x) + γψ(x)` from the local jet.
    fn constraint(&self, jet: &Jet, x: &[f64], u: &[f64]) -> f64 {
        let nx = self.sys.n_x();
        let f = self.sys.drift_vec(x, u);
        let a = self.sys.covariance(x, u);
        let drift: f64 = jet.grad.iter().zip(&f).map(|(g, fi)| g * fi).sum();
        let diffusion: f64 = (0..nx * nx).map(|e| jet.hess[e] * a[e]).sum();
        drift + 0.5 * diffusion + self.gamma * jet.value
    }

    /// Constraint value at state `x` and input `u`.
    pub fn margin(&self, x: &[f64], u: &[f64]) -> Result<f64, FilterError> {
        let jet = self.jet(x)?;
        Ok(self.constraint(&jet, x, u))
    }

    pub fn generator_coefficients(&self, x: &[f64]) -> Result<GeneratorCoefficients, FilterError> {
        let jet = self.jet(x)?;
        Ok(self.coefficients(&jet, x))
    }

    fn coefficients(&self, jet: &Jet, x: &[f64]) -> GeneratorCoefficients {
        let n_u = self.sys.n_u();
        let flags = self.sys.flags();
        let zero = vec![0.0; n_u];
        let c = |u: &[f64]| self.constraint(jet, x, u);
        let unit = |k: usize, s: f64| {
            let mut u = zero.clone();
            u[k] = s;
            u
        };
        if flags.input_affine && flags.sigma_u_independent {
            let c0 = c(&zero);
            let a_lin = (0..n_u).map(|k| c(&unit(k, 1.0)) - c0).collect();
            return GeneratorCoefficients { a0: c0, a_lin, a_quad: None, exact: true };
        }
        if flags.input_affine {
            let c0 = c(&zero);
            let plus: Vec<f64> = (0..n_u).map(|k| c(&unit(k, 1.0))).collect();
            let minus: Vec<f64> = (0..n_u).map(|k| c(&unit(k, -1.0))).collect();
            let a_lin: Vec<f64> = (0..n_u).map(|k| 0.5 * (plus[k] - minus[k])).collect();
            let mut q = vec![0.0; n_u * n_u];
            for k in 0..n_u {
                q[k * n_u + k] = 0.5 * (plus[k] + minus[k]) - c0;
                for l in 0..k {
                    let mut u = unit(k, 1.0);
                    u[l] = 1.0;
                    let v = 0.5 * (c(&u) - plus[k] - plus[l] + c0);
                    q[k * n_u + l] = v;
                    q[l * n_u + k] = v;
                }
            }
            // confirm the quadratic model at an off-axis probe
            let probe: Vec<f64> = (0..n_u)
                .map(|k| self.sys.input_lower()[k] + 0.37 * (self.sys.input_upper()[k] - self.sys.input_lower()[k]))
                .collect();
            let model = quad_eval(c0, &a_lin, Some(q.as_slice()), &probe);
            let truth = c(&probe);
            if (model - truth).abs() <= 1e-8 * (1.0 + truth.abs()) {
                return GeneratorCoefficients { a0: c0, a_lin, a_quad: Some(q), exact: true };
            }
        }
        // linearization at the input-box center
        let center = self.sys.input_center();
        let cc = c(&center);
        let a_lin: Vec<f64> = (0..n_u)
            .map(|k| {
                let h = 1e-6 * (1.0 + (self.sys.input_upper()[k] - self.sys.input_lower()[k]));
                let mut up = center.clone();
                let mut dn = center.clone();
                up[k] += h;
                dn[k] -= h;
                (c(&up) - c(&dn)) / (2.0 * h)
            })
            .collect();
        let a0 = cc - a_lin.iter().zip(&center).map(|(a, u)| a * u).sum::<f64>();
        GeneratorCoefficients { a0, a_lin, a_quad: None, exact: false }
    }

    fn objective(&self, u: &[f64], r: &[f64]) -> f64 {
        u.iter().zip(r).zip(&self.weight).map(|((a, b), w)| w * (a - b) * (a - b)).sum()
    }

    /// Filtered input for reference `u_ref` at state `x`.
    pub fn filter_input(&self, x: &[f64], u_ref: &[f64]) -> Result<FilterOutput, FilterError> {
        let n_u = self.sys.n_u();
        if u_ref.len() != n_u {
            return Err(FilterError::InputLength { got: u_ref.len(), expected: n_u });
        }
        let jet = self.jet(x)?;
        let g = |u: &[f64]| self.constraint(&jet, x, u);
        let mut projected = u_ref.to_vec();
        self.sys.clamp_input(&mut projected);
        let m = g(&projected);
        if m >= -FEASIBILITY_SLACK {
            return Ok(FilterOutput { u: projected, status: FilterStatus::Unmodified, margin: m });
        }
        let coeffs = self.coefficients(&jet, x);
        let solved = match (&coeffs.a_quad, coeffs.exact) {
            (None, true) => self.solve_affine(&coeffs, u_ref),
            (Some(q), true) if n_u == 1 => self.solve_scalar_quadratic(coeffs.a0, coeffs.a_lin[0], q[0], u_ref[0]),
            _ => self.solve_search(&g, u_ref),
        };
        if let Some(u) = solved {
            let m = g(&u);
            if m >= -FEASIBILITY_SLACK {
                return Ok(FilterOutput { u, status: FilterStatus::Modified, margin: m });
            }
        }
        let ub = self.backup.interpolate(x)?;
        let mb = g(&ub);
        if mb >= -FEASIBILITY_SLACK {
            return Ok(FilterOutput { u: ub, status: FilterStatus::Backup, margin: mb });
        }
        let (u, margin) = self.maximize(&g, ub, mb);
        Ok(FilterOutput { u, status: FilterStatus::InfeasibleFallback, margin })
    }

    /// Weighted projection onto `{u ∈ U : a0 + a·u ≥ 0}` by enumerating the
    /// faces of the box with the constraint active or inactive.
    fn solve_affine(&self, c: &GeneratorCoefficients, r: &[f64]) -> Option<Vec<f64>> {
        let n_u = self.sys.n_u();
        let (lo, hi) = (self.sys.input_lower(), self.sys.input_upper());
        let a = &c.a_lin;
        let w = &self.weight;
        let mut best: Option<(f64, Vec<f64>)> = None;
        let total = 3usize.pow(n_u as u32);
        for face in 0..total {
            // 0 = at lower bound, 1 = at upper bound, 2 = free
            let mut state = vec![0u8; n_u];
            let mut rem = face;
            for s in state.iter_mut() {
                *s = (rem % 3) as u8;
                rem /= 3;
            }
            for active in [false, true] {
                let mut u = vec![0.0; n_u];
                let mut fixed_sum = c.a0;
                let mut free_r = 0.0;
                let mut free_aa = 0.0;
                for k in 0..n_u {
                    match state[k] {
                        0 => {
                            u[k] = lo[k];
                            fixed_sum += a[k] * lo[k];
                        }
                        1 => {
                            u[k] = hi[k];
                            fixed_sum += a[k] * hi[k];
                        }
                        _ => {
                            free_r += a[k] * r[k];
                            free_aa += a[k] * a[k] / w[k];
                        }
                    }
                }
                let lambda = if active {
                    if free_aa <= 0.0 {
                        continue;
                    }
                    -(fixed_sum + free_r) / free_aa
                } else {
                    0.0
                };
                for k in 0..n_u {
                    if state[k] == 2 {
                        u[k] = r[k] + lambda * a[k] / w[k];
                    }
                }
                let in_box = (0..n_u).all(|k| u[k] >= lo[k] - 1e-12 && u[k] <= hi[k] + 1e-12);
                if !in_box {
                    continue;
                }
                self.sys.clamp_input(&mut u);
                let val = c.a0 + a.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
                if val < -FEASIBILITY_SLACK {
                    continue;
                }
                let obj = self.objective(&u, r);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, u));
                }
            }
        }
        best.map(|(_, u)| u)
    }

    /// Projection onto `{u ∈ [lo, hi] : a0 + a1 u + q u² ≥ 0}`: the feasible
    /// set is a union of intervals whose ends are box ends or roots.
    fn solve_scalar_quadratic(&self, a0: f64, a1: f64, q: f64, r: f64) -> Option<Vec<f64>> {
        let (lo, hi) = (self.sys.input_lower()[0], self.sys.input_upper()[0]);
        let val = |u: f64| a0 + a1 * u + q * u * u;
        let mut cands = vec![r.clamp(lo, hi), lo, hi];
        if q.abs() > 1e-300 {
            let disc = a1 * a1 - 4.0 * q * a0;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                // numerically stable root pair
                let t = -0.5 * (a1 + a1.signum() * sq);
                if t != 0.0 {
                    cands.push(t / q);
                    cands.push(a0 / t);
                } else {
                    cands.push(0.0);
                }
            }
        } else if a1 != 0.0 {
            cands.push(-a0 / a1);
        }
        let mut best: Option<(f64, f64)> = None;
        for u in cands {
            if !u.is_finite() || u < lo || u > hi || val(u) < -FEASIBILITY_SLACK {
                continue;
            }
            let d = (u - r).abs();
            let better = match best {
                None => true,
                Some((bd, bu)) => d < bd || (d == bd && u < bu),
            };
            if better {
                best = Some((d, u));
            }
        }
        best.map(|(_, u)| vec![u])
    }

    fn grid_inputs(&self) -> Vec<Vec<f64>> {
        let n_u = self.sys.n_u();
        let (lo, hi) = (self.sys.input_lower(), self.sys.input_upper());
        let n = NONAFFINE_GRID;
        (0..n.pow(n_u as u32))
            .map(|idx| {
                let mut rem = idx;
                (0..n_u)
                    .map(|k| {
                        let j = rem % n;
                        rem /= n;
                        lo[k] + (hi[k] - lo[k]) * j as f64 / (n - 1) as f64
                    })
                    .collect()
            })
            .collect()
    }

    /// Candidate grid over the box, then coordinate refinement of the best
    /// feasible candidate toward the reference.
    fn solve_search(&self, g: &dyn Fn(&[f64]) -> f64, r: &[f64]) -> Option<Vec<f64>> {
        let n_u = self.sys.n_u();
        let (lo, hi) = (self.sys.input_lower(), self.sys.input_upper());
        let mut best: Option<(f64, Vec<f64>)> = None;
        for u in self.grid_inputs() {
            if g(&u) >= -FEASIBILITY_SLACK {
                let obj = self.objective(&u, r);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, u));
                }
            }
        }
        let (mut obj, mut u) = best?;
        let mut step: Vec<f64> = (0..n_u).map(|k| (hi[k] - lo[k]) / (NONAFFINE_GRID - 1) as f64).collect();
        for _ in 0..REFINE_ITERS {
            for k in 0..n_u {
                step[k] *= 0.5;
                for dir in [-1.0, 1.0] {
                    let mut trial = u.clone();
                    trial[k] = (trial[k] + dir * step[k]).clamp(lo[k], hi[k]);
                    let o = self.objective(&trial, r);
                    if o < obj && g(&trial) >= -FEASIBILITY_SLACK {
                        obj = o;
                        u = trial;
                    }
                }
            }
        }
        Some(u)
    }

    /// Input with the largest constraint value among grid candidates and
    /// the given starting input.
    fn maximize(&self, g: &dyn Fn(&[f64]) -> f64, start: Vec<f64>, start_val: f64) -> (Vec<f64>, f64) {
        let mut best = (start, start_val);
        for u in self.grid_inputs() {
            let v = g(&u);
            if v > best.1 {
                best = (u, v);
            }
        }
        best
    }
}

fn quad_eval(a0: f64, a: &[f64], q: Option<&[f64]>, u: &[f64]) -> f64 {
    let n = u.len();
    let mut v = a0 + a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>();
    if let Some(q) = q {
        for i in 0..n {
            for j in 0..n {
                v += u[i] * q[i * n + j] * u[j];
            }
        }
    }
    v
}
