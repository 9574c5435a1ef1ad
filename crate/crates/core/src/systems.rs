//! Controlled Itô diffusions `dX = f(X, u) dt + σ(X, u) dW` and the built-in
//! benchmark models.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{GridError, GridSpec, ImplicitSet, ScalarField};

/// Writes `f(x, u)` into the output slice (length `n_x`).
pub type DriftFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
/// Writes `σ(x, u)` row-major (`n_x` rows, `n_w` columns) into the output slice.
pub type DiffusionFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
/// Signed distance of an excluded region: positive inside the obstacle.
pub type ObstacleFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("unknown parameter `{name}` for system `{system}`")]
    UnknownParameter { system: String, name: String },
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("airspeed must be positive, got {0}")]
    NonPositiveAirspeed(f64),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("declared structure flag `{flag}` disagrees with probing (declared {declared})")]
    FlagMismatch { flag: &'static str, declared: bool },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StructureFlags {
    pub input_affine: bool,
    pub sigma_u_independent: bool,
    pub sigma_zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    DiOmni,
    DiVelocity,
    DiInputNoise,
    DiDeterministic,
    WigAircraft,
    Bicycle,
    #[serde(rename = "brownian_1d")]
    Brownian1d,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 7] = [
        BenchmarkId::DiOmni,
        BenchmarkId::DiVelocity,
        BenchmarkId::DiInputNoise,
        BenchmarkId::DiDeterministic,
        BenchmarkId::WigAircraft,
        BenchmarkId::Bicycle,
        BenchmarkId::Brownian1d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkId::DiOmni => "di_omni",
            BenchmarkId::DiVelocity => "di_velocity",
            BenchmarkId::DiInputNoise => "di_input_noise",
            BenchmarkId::DiDeterministic => "di_deterministic",
            BenchmarkId::WigAircraft => "wig_aircraft",
            BenchmarkId::Bicycle => "bicycle",
            BenchmarkId::Brownian1d => "brownian_1d",
        }
    }

    /// Grid resolution used when the caller does not choose one.
    pub fn default_counts(self) -> Vec<usize> {
        match self {
            BenchmarkId::DiOmni
            | BenchmarkId::DiVelocity
            | BenchmarkId::DiInputNoise
            | BenchmarkId::DiDeterministic => vec![81, 161],
            BenchmarkId::WigAircraft => vec![51, 51, 51],
            BenchmarkId::Bicycle => vec![41, 41, 24, 17],
            BenchmarkId::Brownian1d => vec![201],
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkId {
    type Err = SystemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchmarkId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| SystemError::UnknownSystem(s.to_string()))
    }
}

/// A controlled SDE restricted to a safe set on a grid.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    n_x: usize,
    n_u: usize,
    n_w: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    grid: GridSpec,
    safe_set: ImplicitSet,
    obstacle: Option<Arc<ObstacleFn>>,
    flags: StructureFlags,
    noise_full_rank: bool,
    params: BTreeMap<String, f64>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("n_w", &self.n_w)
            .field("grid", &self.grid)
            .field("flags", &self.flags)
            .field("noise_full_rank", &self.noise_full_rank)
            .field("params", &self.params)
            .finish()
    }
}

/// Inputs for [`SystemModel::new`].
pub struct ModelParts {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub drift: Arc<DriftFn>,
    pub diffusion: Arc<DiffusionFn>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub grid: GridSpec,
    pub obstacle: Option<Arc<ObstacleFn>>,
    /// Flags the caller expects; each is checked by probing.
    pub declared: Option<StructureFlags>,
    pub params: BTreeMap<String, f64>,
}

const PROBES: usize = 24;

impl SystemModel {
    pub fn new(parts: ModelParts) -> Result<Self, SystemError> {
        let ModelParts {
            name,
            n_x,
            n_u,
            n_w,
            drift,
            diffusion,
            input_lower,
            input_upper,
            grid,
            obstacle,
            declared,
            params,
        } = parts;
        if n_x == 0 || n_w == 0 {
            return Err(SystemError::Invalid("state and noise dimensions must be positive".into()));
        }
        if grid.dims() != n_x {
            return Err(SystemError::Invalid(format!("grid has {} dims, model has {n_x}", grid.dims())));
        }
        if input_lower.len() != n_u || input_upper.len() != n_u {
            return Err(SystemError::Invalid("input box dimension mismatch".into()));
        }
        if input_lower.iter().zip(&input_upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(SystemError::Invalid("input box needs finite lower <= upper".into()));
        }
        let safe_set = build_safe_set(&grid, obstacle.as_deref())?;
        let mut model = SystemModel {
            name,
            n_x,
            n_u,
            n_w,
            drift,
            diffusion,
            input_lower,
            input_upper,
            grid,
            safe_set,
            obstacle,
            flags: StructureFlags { input_affine: true, sigma_u_independent: true, sigma_zero: true },
            noise_full_rank: false,
            params,
        };
        let (flags, full_rank) = model.probe_structure()?;
        if let Some(d) = declared {
            for (flag, want, got) in [
                ("input_affine", d.input_affine, flags.input_affine),
                ("sigma_u_independent", d.sigma_u_independent, flags.sigma_u_independent),
                ("sigma_zero", d.sigma_zero, flags.sigma_zero),
            ] {
                if want != got {
                    return Err(SystemError::FlagMismatch { flag, declared: want });
                }
            }
        }
        model.flags = flags;
        model.noise_full_rank = full_rank;
        Ok(model)
    }

    /// Same model on a grid with different node counts.
    pub fn with_resolution(&self, counts: &[usize]) -> Result<Self, SystemError> {
        if counts.len() != self.n_x {
            return Err(SystemError::Invalid(format!(
                "resolution has {} entries, state has {} dims",
                counts.len(),
                self.n_x
            )));
        }
        let grid = self.grid.with_counts(counts)?;
        let safe_set = build_safe_set(&grid, self.obstacle.as_deref())?;
        Ok(SystemModel { grid, safe_set, ..self.clone() })
    }

    fn probe_structure(&self) -> Result<(StructureFlags, bool), SystemError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cbf0);
        let mut flags = StructureFlags { input_affine: true, sigma_u_independent: true, sigma_zero: true };
        let mut full_rank = true;
        let (nx, nu, nw) = (self.n_x, self.n_u, self.n_w);
        let mut f = vec![0.0; nx];
        let mut s = vec![0.0; nx * nw];
        for _ in 0..PROBES {
            let x = self.random_state(&mut rng);
            let u1 = self.random_input(&mut rng);
            let u2 = self.random_input(&mut rng);
            let t: f64 = rng.random();
            let um: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let f1 = self.drift_vec(&x, &u1);
            let f2 = self.drift_vec(&x, &u2);
            self.drift(&x, &um, &mut f);
            for i in 0..nx {
                let v = [f1[i], f2[i], f[i]];
                if v.iter().any(|z| !z.is_finite()) {
                    return Err(SystemError::Invalid(format!("non-finite drift at {x:?}")));
                }
                let fit = t * f1[i] + (1.0 - t) * f2[i];
                if (f[i] - fit).abs() > 1e-10 * (1.0 + f[i].abs().max(fit.abs())) {
                    flags.input_affine = false;
                }
            }
            let s1 = self.diffusion_vec(&x, &u1);
            self.diffusion(&x, &u2, &mut s);
            for (a, b) in s1.iter().zip(&s) {
                if !a.is_finite() || !b.is_finite() {
                    return Err(SystemError::Invalid(format!("non-finite diffusion at {x:?}")));
                }
                if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    flags.sigma_u_independent = false;
                }
                if *a != 0.0 || *b != 0.0 {
                    flags.sigma_zero = false;
                }
            }
            if self.noise_rank(&x, &u1) < nx {
                full_rank = false;
            }
        }
        if nu == 0 {
            flags.input_affine = true;
            flags.sigma_u_independent = true;
        }
        Ok((flags, full_rank))
    }

    pub(crate) fn random_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        let g = &self.grid;
        loop {
            let x: Vec<f64> = (0..self.n_x)
                .map(|i| {
                    let t: f64 = rng.random();
                    g.lower()[i] + t * (g.upper()[i] - g.lower()[i])
                })
                .collect();
            if self.obstacle.as_ref().is_none_or(|o| o(&x) <= 0.0) {
                return x;
            }
        }
    }

    pub(crate) fn random_input(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.n_u)
            .map(|k| {
                let t: f64 = rng.random();
                self.input_lower[k] + t * (self.input_upper[k] - self.input_lower[k])
            })
            .collect()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn safe_set(&self) -> &ImplicitSet {
        &self.safe_set
    }

    pub fn flags(&self) -> StructureFlags {
        self.flags
    }

    /// Whether σ had full row rank on every probe. Diagnostic only.
    pub fn noise_full_rank(&self) -> bool {
        self.noise_full_rank
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn input_lower(&self) -> &[f64] {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &[f64] {
        &self.input_upper
    }

    pub fn input_center(&self) -> Vec<f64> {
        self.input_lower.iter().zip(&self.input_upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn clamp_input(&self, u: &mut [f64]) {
        for (k, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.input_lower[k], self.input_upper[k]);
        }
    }

    #[inline]
    pub fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(x, u, out)
    }

    #[inline]
    pub fn diffusion(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, u, out)
    }

    pub fn drift_vec(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x];
        self.drift(x, u, &mut out);
        out
    }

    pub fn diffusion_vec(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x * self.n_w];
        self.diffusion(x, u, &mut out);
        out
    }

    /// `σσᵀ` row-major, written into `out` (length `n_x²`); `scratch` holds σ.
    pub fn covariance_into(&self, x: &[f64], u: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let (nx, nw) = (self.n_x, self.n_w);
        self.diffusion(x, u, scratch);
        for i in 0..nx {
            for j in i..nx {
                let mut s = 0.0;
                for k in 0..nw {
                    s += scratch[i * nw + k] * scratch[j * nw + k];
                }
                out[i * nx + j] = s;
                out[j * nx + i] = s;
            }
        }
    }

    pub fn covariance(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut scratch = vec![0.0; self.n_x * self.n_w];
        let mut out = vec![0.0; self.n_x * self.n_x];
        self.covariance_into(x, u, &mut scratch, &mut out);
        out
    }

    /// Numerical rank of σ(x, u) from its singular values.
    pub fn noise_rank(&self, x: &[f64], u: &[f64]) -> usize {
        let s = DMatrix::from_row_slice(self.n_x, self.n_w, &self.diffusion_vec(x, u));
        let sv = s.singular_values();
        let top = sv.iter().copied().fold(0.0, f64::max);
        if top == 0.0 {
            return 0;
        }
        sv.iter().filter(|&&v| v > 1e-10 * top).count()
    }

    /// Whether `x` lies in the safe set (box plus obstacle exclusion).
    pub fn in_safe_set(&self, x: &[f64]) -> bool {
        self.grid.contains(x) && self.obstacle.as_ref().is_none_or(|o| o(x) <= 0.0)
    }

    pub fn has_obstacle(&self) -> bool {
        self.obstacle.is_some()
    }
}

fn build_safe_set(grid: &GridSpec, obstacle: Option<&ObstacleFn>) -> Result<ImplicitSet, SystemError> {
    Ok(match obstacle {
        None => ImplicitSet::Box,
        Some(o) => ImplicitSet::signed_distance(ScalarField::from_fn(grid.clone(), o)?)?,
    })
}

fn resolve_params(
    system: BenchmarkId,
    defaults: &[(&str, f64)],
    overrides: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, SystemError> {
    let mut params: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) => *slot = *v,
            None => {
                return Err(SystemError::UnknownParameter { system: system.name().into(), name: k.clone() })
            }
        }
    }
    Ok(params)
}

/// Physical constants of the wing-in-ground-effect model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WigParams {
    pub m: f64,
    pub g: f64,
    pub rho: f64,
    pub s: f64,
    pub b: f64,
    pub c_ge: f64,
    pub k_l: f64,
    pub k_d: f64,
    pub k_i: f64,
    pub c_l0: f64,
    pub c_l_alpha: f64,
    pub c_d0: f64,
    pub c_f: f64,
    pub v_f: f64,
    pub sigma_l2: f64,
    pub sigma_d2: f64,
}

const WIG_DEFAULTS: [(&str, f64); 16] = [
    ("m", 500.0),
    ("g", 9.81),
    ("rho", 1.225),
    ("S", 12.0),
    ("b", 10.0),
    ("c_GE", 0.2),
    ("k_L", 5.0),
    ("k_D", 5.0),
    ("k_i", 0.05),
    ("C_L0", 0.2),
    ("C_Lalpha", 5.0),
    ("C_D0", 0.03),
    ("c_F", 0.02),
    ("V_F", 20.0),
    ("Sigma_L2", 6.0e4),
    ("Sigma_D2", 156.0),
];

impl WigParams {
    fn from_map(p: &BTreeMap<String, f64>) -> Self {
        WigParams {
            m: p["m"],
            g: p["g"],
            rho: p["rho"],
            s: p["S"],
            b: p["b"],
            c_ge: p["c_GE"],
            k_l: p["k_L"],
            k_d: p["k_D"],
            k_i: p["k_i"],
            c_l0: p["C_L0"],
            c_l_alpha: p["C_Lalpha"],
            c_d0: p["C_D0"],
            c_f: p["c_F"],
            v_f: p["V_F"],
            sigma_l2: p["Sigma_L2"],
            sigma_d2: p["Sigma_D2"],
        }
    }
}

impl Default for WigParams {
    fn default() -> Self {
        WigParams::from_map(&WIG_DEFAULTS.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

/// Thrust, lift and drag for state `[H, V, Γ]` and input `[α, F_c]`.
pub fn wig_forces(x: &[f64], u: &[f64], p: &WigParams) -> Result<(f64, f64, f64), SystemError> {
    let (h, v) = (x[0], x[1]);
    if !(v > 0.0) {
        return Err(SystemError::NonPositiveAirspeed(v));
    }
    Ok(wig_forces_unchecked(h, v, u[0], u[1], p))
}

#[inline]
fn wig_forces_unchecked(h: f64, v: f64, alpha: f64, thrust_cmd: f64, p: &WigParams) -> (f64, f64, f64) {
    let thrust = thrust_cmd * (1.0 - p.c_f * (v - p.v_f)).clamp(0.0, 1.0);
    let q = 0.5 * p.rho * p.s * v * v;
    let cl_inf = p.c_l0 + p.c_l_alpha * alpha;
    let cl = cl_inf * (1.0 + p.c_ge * (-p.k_l * h / p.b).exp());
    let cd = p.c_d0 + p.k_i * cl_inf * cl_inf * (1.0 - (-p.k_d * h / p.b).exp());
    (thrust, q * cl, q * cd)
}

// Airspeed floor inside the drift closure; the safe set keeps V >= 20 m/s.
const WIG_MIN_AIRSPEED: f64 = 1e-3;

/// Builds a benchmark model with parameter overrides on its default grid.
pub fn make_benchmark(id: BenchmarkId, overrides: &BTreeMap<String, f64>) -> Result<SystemModel, SystemError> {
    let name = id.name().to_string();
    let di_grid = || GridSpec::boxed(&[-1.0, -2.0], &[1.0, 2.0], &id.default_counts());
    let di_drift: Arc<DriftFn> = Arc::new(|x, u, out| {
        out[0] = x[1];
        out[1] = u[0];
    });
    let flags = |input_affine, sigma_u_independent, sigma_zero| {
        Some(StructureFlags { input_affine, sigma_u_independent, sigma_zero })
    };
    let parts = match id {
        BenchmarkId::DiOmni => {
            let p = resolve_params(id, &[("sigma", 1.0)], overrides)?;
            let s = p["sigma"];
            ModelParts {
                name,
                n_x: 2,
                n_u: 1,
                n_w: 2,
                drift: di_drift,
                diffusion: Arc::new(move |_, _, out| {
                    out.copy_from_slice(&[s, 0.0, 0.0, s]);
                }),
                input_lower: vec![-1.0],
                input_upper: vec![1.0],
                grid: di_grid()?,
                obstacle: None,
                declared: flags(true, true, s == 0.0),
                params: p,
            }
        }
        BenchmarkId::DiVelocity => {
            let p = resolve_params(id, &[("sigma", 1.0)], overrides)?;
            let s = p["sigma"];
            ModelParts {
                name,
                n_x: 2,
                n_u: 1,
                n_w: 1,
                drift: di_drift,
                diffusion: Arc::new(move |_, _, out| {
                    out[0] = 0.0;
                    out[1] = s;
                }),
                input_lower: vec![-1.0],
                input_upper: vec![1.0],
                grid: di_grid()?,
                obstacle: None,
                declared: flags(true, true, s == 0.0),
                params: p,
            }
        }
        BenchmarkId::DiInputNoise => {
            let p = resolve_params(id, &[], overrides)?;
            ModelParts {
                name,
                n_x: 2,
                n_u: 1,
                n_w: 1,
                drift: di_drift,
                diffusion: Arc::new(|_, u, out| {
                    out[0] = 0.0;
                    out[1] = (1.0 + u[0] * u[0]).sqrt();
                }),
                input_lower: vec![-1.0],
                input_upper: vec![1.0],
                grid: di_grid()?,
                obstacle: None,
                declared: flags(true, false, false),
                params: p,
            }
        }
        BenchmarkId::DiDeterministic => {
            let p = resolve_params(id, &[], overrides)?;
            ModelParts {
                name,
                n_x: 2,
                n_u: 1,
                n_w: 1,
                drift: di_drift,
                diffusion: Arc::new(|_, _, out| out.fill(0.0)),
                input_lower: vec![-1.0],
                input_upper: vec![1.0],
                grid: di_grid()?,
                obstacle: None,
                declared: flags(true, true, true),
                params: p,
            }
        }
        BenchmarkId::WigAircraft => {
            let p = resolve_params(id, &WIG_DEFAULTS, overrides)?;
            let w = WigParams::from_map(&p);
            let (sig_l, sig_d) = (w.sigma_l2.sqrt(), w.sigma_d2.sqrt());
            ModelParts {
                name,
                n_x: 3,
                n_u: 2,
                n_w: 2,
                drift: Arc::new(move |x, u, out| {
                    let (h, gam) = (x[0], x[2]);
                    let v = x[1].max(WIG_MIN_AIRSPEED);
                    let (alpha, cmd) = (u[0], u[1]);
                    let (thrust, lift, drag) = wig_forces_unchecked(h, v, alpha, cmd, &w);
                    out[0] = v * gam.sin();
                    out[1] = (thrust * alpha.cos() - drag - w.m * w.g * gam.sin()) / w.m;
                    out[2] = (thrust * alpha.sin() + lift - w.m * w.g * gam.cos()) / (w.m * v);
                }),
                // columns: drag-force noise, lift-force noise
                diffusion: Arc::new(move |x, _, out| {
                    let v = x[1].max(WIG_MIN_AIRSPEED);
                    out.fill(0.0);
                    out[2] = sig_d / w.m;
                    out[5] = sig_l / (w.m * v);
                }),
                input_lower: vec![0.0, 0.0],
                input_upper: vec![0.2, 1000.0],
                grid: GridSpec::boxed(&[0.0, 20.0, -0.15], &[10.0, 70.0, 0.15], &id.default_counts())?,
                obstacle: None,
                declared: flags(false, true, false),
                params: p,
            }
        }
        BenchmarkId::Bicycle => {
            let p = resolve_params(
                id,
                &[
                    ("obstacle_radius", 1.0),
                    ("box_half_width", 3.0),
                    ("v_max", 2.0),
                    ("sigma_theta", 0.5),
                    ("sigma_v", 0.5),
                ],
                overrides,
            )?;
            let (r, half, vmax) = (p["obstacle_radius"], p["box_half_width"], p["v_max"]);
            let (st, sv) = (p["sigma_theta"], p["sigma_v"]);
            let counts = id.default_counts();
            ModelParts {
                name,
                n_x: 4,
                n_u: 2,
                n_w: 2,
                drift: Arc::new(|x, u, out| {
                    let (th, v) = (x[2], x[3]);
                    out[0] = v * th.cos();
                    out[1] = v * th.sin();
                    out[2] = v * u[0];
                    out[3] = u[1];
                }),
                diffusion: Arc::new(move |_, _, out| {
                    out.fill(0.0);
                    out[4] = st;
                    out[7] = sv;
                }),
                input_lower: vec![-1.0, -1.0],
                input_upper: vec![1.0, 1.0],
                grid: GridSpec::new(
                    vec![-half, -half, -PI, -vmax],
                    vec![half, half, PI, vmax],
                    counts,
                    vec![false, false, true, false],
                )?,
                obstacle: Some(Arc::new(move |x: &[f64]| r - x[0].hypot(x[1]))),
                declared: flags(true, true, false),
                params: p,
            }
        }
        BenchmarkId::Brownian1d => {
            let p = resolve_params(id, &[("sigma", 1.0), ("a", -1.0), ("b", 1.0)], overrides)?;
            let s = p["sigma"];
            ModelParts {
                name,
                n_x: 1,
                n_u: 0,
                n_w: 1,
                drift: Arc::new(|_, _, out| out[0] = 0.0),
                diffusion: Arc::new(move |_, _, out| out[0] = s),
                input_lower: vec![],
                input_upper: vec![],
                grid: GridSpec::boxed(&[p["a"]], &[p["b"]], &id.default_counts())?,
                obstacle: None,
                declared: flags(true, true, s == 0.0),
                params: p,
            }
        }
    };
    SystemModel::new(parts)
}
