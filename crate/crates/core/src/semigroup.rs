//! The killed-diffusion semigroup on a grid.
//!
//! `T_t β` is computed by integrating `∂τ b = 𝒜 b` with an explicit
//! monotone scheme: first-order upwind differences for the drift, central
//! second differences for the diffusion (a seven-point mixed stencil for
//! off-diagonal covariance), forward Euler in time under a CFL cap.
//! Values outside the grid, on exterior nodes and on killed boundary nodes
//! are read as zero, which is the coffin-state convention `β(K) = 0`.
//!
//! A boundary node is killed (held at zero) when the noise has a component
//! along the boundary normal there. Other boundary nodes evolve with the
//! stencil, so outflow reads the zero ghost while inflow does not.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{classify_nodes, GridError, GridSpec, NodeClassification, NodeKind, ScalarField};
use crate::systems::SystemModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemigroupError {
    #[error("node {0} is not an interior node")]
    NotInterior(usize),
    #[error("stable time step {dt:e} is below the floor {min_dt:e}")]
    StabilityViolation { dt: f64, min_dt: f64 },
    #[error("invalid propagation config: {0}")]
    InvalidConfig(String),
    #[error("policy does not match the system: {0}")]
    PolicyMismatch(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Tabulated feedback law, one input vector per grid node. Inputs are
/// clamped to the input box on every write.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    spec: GridSpec,
    n_u: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    inputs: Vec<f64>,
}

impl PolicyTable {
    pub fn constant(sys: &SystemModel, u: &[f64]) -> Self {
        let n_u = sys.n_u();
        let mut u = u.to_vec();
        sys.clamp_input(&mut u);
        let inputs = u.iter().copied().cycle().take(n_u * sys.grid().len()).collect();
        PolicyTable {
            spec: sys.grid().clone(),
            n_u,
            lower: sys.input_lower().to_vec(),
            upper: sys.input_upper().to_vec(),
            inputs,
        }
    }

    /// The policy that applies the center of the input box everywhere.
    pub fn centered(sys: &SystemModel) -> Self {
        Self::constant(sys, &sys.input_center())
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn input(&self, node: usize) -> &[f64] {
        &self.inputs[node * self.n_u..(node + 1) * self.n_u]
    }

    pub fn set(&mut self, node: usize, u: &[f64]) {
        for k in 0..self.n_u {
            self.inputs[node * self.n_u + k] = u[k].clamp(self.lower[k], self.upper[k]);
        }
    }

    /// Channel-wise multilinear interpolation, clamped to the input box.
    pub fn interpolate(&self, x: &[f64]) -> Result<Vec<f64>, GridError> {
        let mut u = vec![0.0; self.n_u];
        self.interpolate_into(x, &mut u)?;
        Ok(u)
    }

    pub fn interpolate_into(&self, x: &[f64], u: &mut [f64]) -> Result<(), GridError> {
        u.fill(0.0);
        let n_u = self.n_u;
        self.spec.for_each_corner(x, |node, w| {
            for k in 0..n_u {
                u[k] += w * self.inputs[node * n_u + k];
            }
        })?;
        for k in 0..n_u {
            u[k] = u[k].clamp(self.lower[k], self.upper[k]);
        }
        Ok(())
    }

    /// Input channel `k` as a scalar field.
    pub fn channel(&self, k: usize) -> ScalarField {
        let values = self.inputs.iter().skip(k).step_by(self.n_u).copied().collect();
        ScalarField::from_raw(self.spec.clone(), values)
    }

    pub fn from_channels(sys: &SystemModel, channels: &[ScalarField]) -> Result<Self, SemigroupError> {
        if channels.len() != sys.n_u() {
            return Err(SemigroupError::PolicyMismatch(format!(
                "expected {} channels, got {}",
                sys.n_u(),
                channels.len()
            )));
        }
        let mut table = PolicyTable::centered(sys);
        for (k, ch) in channels.iter().enumerate() {
            if ch.spec() != sys.grid() {
                return Err(SemigroupError::PolicyMismatch(format!("channel {k} grid differs")));
            }
        }
        let mut u = vec![0.0; sys.n_u()];
        for node in 0..sys.grid().len() {
            for (k, ch) in channels.iter().enumerate() {
                u[k] = ch.values()[node];
            }
            table.set(node, &u);
        }
        Ok(table)
    }

    fn check(&self, sys: &SystemModel) -> Result<(), SemigroupError> {
        if &self.spec != sys.grid() || self.n_u != sys.n_u() {
            return Err(SemigroupError::PolicyMismatch("grid or input dimension differs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    UpwindExplicit,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    pub horizon: f64,
    pub cfl_safety: f64,
    pub scheme: Scheme,
    /// Smallest admissible internal step; smaller stable steps abort.
    pub min_dt: f64,
    /// Points per input dimension for the Cartesian argmax search.
    pub candidates_per_dim: usize,
    /// Memory budget for caching per-node stencil weights of argmax candidates.
    pub cache_limit_bytes: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            horizon: 0.5,
            cfl_safety: 0.8,
            scheme: Scheme::UpwindExplicit,
            min_dt: 1e-7,
            candidates_per_dim: 9,
            cache_limit_bytes: 1 << 29,
        }
    }
}

impl PropagationConfig {
    pub fn with_horizon(horizon: f64) -> Self {
        PropagationConfig { horizon, ..Default::default() }
    }

    fn validate(&self) -> Result<(), SemigroupError> {
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(SemigroupError::InvalidConfig(format!("horizon must be >= 0, got {}", self.horizon)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(SemigroupError::InvalidConfig(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if self.candidates_per_dim < 2 {
            return Err(SemigroupError::InvalidConfig("candidates_per_dim must be >= 2".into()));
        }
        Ok(())
    }
}

struct Scratch {
    x: Vec<f64>,
    f: Vec<f64>,
    sig: Vec<f64>,
    a: Vec<f64>,
}

impl Scratch {
    fn new(sys: &SystemModel) -> Self {
        let (nx, nw) = (sys.n_x(), sys.n_w());
        Scratch { x: vec![0.0; nx], f: vec![0.0; nx], sig: vec![0.0; nx * nw], a: vec![0.0; nx * nx] }
    }
}

/// Stencil geometry of a system on its grid: neighbor slots, killed nodes
/// and the covariance pairs that need mixed-derivative slots.
pub struct Discretization<'a> {
    sys: &'a SystemModel,
    n: usize,
    slots: usize,
    cross: Vec<(usize, usize)>,
    nbr: Vec<u32>,
    live: Vec<bool>,
    classes: NodeClassification,
    inv_h: Vec<f64>,
}

const CHUNK: usize = 512;

impl<'a> Discretization<'a> {
    pub fn new(sys: &'a SystemModel) -> Result<Self, SemigroupError> {
        let spec = sys.grid();
        let n = spec.len();
        if n >= u32::MAX as usize {
            return Err(SemigroupError::InvalidConfig("grid too large".into()));
        }
        let nx = sys.n_x();
        let classes = classify_nodes(spec, sys.safe_set())?;
        let cross = detect_cross_pairs(sys);
        let slots = 2 * nx + 4 * cross.len();
        let sentinel = n as u32;
        let mut nbr = vec![sentinel; n * slots];
        let to_u32 = |o: Option<usize>| o.map_or(sentinel, |v| v as u32);
        for k in 0..n {
            let row = &mut nbr[k * slots..(k + 1) * slots];
            for i in 0..nx {
                row[2 * i] = to_u32(spec.shift(k, i, -1));
                row[2 * i + 1] = to_u32(spec.shift(k, i, 1));
            }
            for (p, &(i, j)) in cross.iter().enumerate() {
                let diag = |di: isize, dj: isize| to_u32(spec.shift(k, i, di).and_then(|m| spec.shift(m, j, dj)));
                let base = 2 * nx + 4 * p;
                row[base] = diag(1, 1);
                row[base + 1] = diag(-1, -1);
                row[base + 2] = diag(1, -1);
                row[base + 3] = diag(-1, 1);
            }
        }
        let live = killed_mask(sys, &classes)?.into_iter().map(|killed| !killed).collect();
        let inv_h = (0..nx).map(|i| 1.0 / spec.spacing(i)).collect();
        Ok(Discretization { sys, n, slots, cross, nbr, live, classes, inv_h })
    }

    pub fn system(&self) -> &SystemModel {
        self.sys
    }

    pub fn classes(&self) -> &NodeClassification {
        &self.classes
    }

    /// Nodes that evolve under the stencil (interior plus non-killed boundary).
    pub fn is_live(&self, node: usize) -> bool {
        self.live[node]
    }

    /// Boundary or exterior nodes pinned to zero.
    pub fn is_killed(&self, node: usize) -> bool {
        !self.live[node]
    }

    /// Sets every pinned node to zero.
    pub fn mask(&self, field: &ScalarField) -> ScalarField {
        let values = field.values().iter().zip(&self.live).map(|(&v, &l)| if l { v } else { 0.0 }).collect();
        ScalarField::from_raw(field.spec().clone(), values)
    }

    /// Stencil weights for input `u` at the node whose coordinates sit in
    /// `sc.x`; returns the CFL rate.
    fn fill_weights(&self, u: &[f64], sc: &mut Scratch, w: &mut [f64]) -> f64 {
        let nx = self.sys.n_x();
        self.sys.drift(&sc.x, u, &mut sc.f);
        self.sys.covariance_into(&sc.x, u, &mut sc.sig, &mut sc.a);
        let mut rate = 0.0;
        for i in 0..nx {
            let ih = self.inv_h[i];
            let aii = sc.a[i * nx + i];
            let diff = 0.5 * aii * ih * ih;
            let fi = sc.f[i];
            w[2 * i] = diff + (-fi).max(0.0) * ih;
            w[2 * i + 1] = diff + fi.max(0.0) * ih;
            rate += fi.abs() * ih + aii * ih * ih;
        }
        for (p, &(i, j)) in self.cross.iter().enumerate() {
            let c = 0.5 * sc.a[i * nx + j] * self.inv_h[i] * self.inv_h[j];
            let ac = c.abs();
            w[2 * i] -= ac;
            w[2 * i + 1] -= ac;
            w[2 * j] -= ac;
            w[2 * j + 1] -= ac;
            let base = 2 * nx + 4 * p;
            let (same, opposite) = if c > 0.0 { (ac, 0.0) } else { (0.0, ac) };
            w[base] = same;
            w[base + 1] = same;
            w[base + 2] = opposite;
            w[base + 3] = opposite;
            rate += 2.0 * ac;
        }
        rate
    }

    #[inline]
    fn differences(&self, node: usize, buf: &[f64], d: &mut [f64]) {
        let bk = buf[node];
        let row = &self.nbr[node * self.slots..(node + 1) * self.slots];
        for (ds, &j) in d.iter_mut().zip(row) {
            *ds = buf[j as usize] - bk;
        }
    }

    /// Discrete `𝒜^u β` at an interior node. Pinned and out-of-grid
    /// neighbors read as zero.
    pub fn generator(&self, field: &ScalarField, u: &[f64], node: usize) -> Result<f64, SemigroupError> {
        if field.spec() != self.sys.grid() {
            return Err(GridError::GridMismatch.into());
        }
        if self.classes.kinds.get(node) != Some(&NodeKind::Interior) {
            return Err(SemigroupError::NotInterior(node));
        }
        let mut sc = Scratch::new(self.sys);
        self.sys.grid().node_coords(node, &mut sc.x);
        let mut w = vec![0.0; self.slots];
        self.fill_weights(u, &mut sc, &mut w);
        let bk = field.values()[node];
        let row = &self.nbr[node * self.slots..(node + 1) * self.slots];
        Ok(row
            .iter()
            .zip(&w)
            .map(|(&j, wj)| {
                let j = j as usize;
                let bj = if j < self.n && self.live[j] { field.values()[j] } else { 0.0 };
                wj * (bj - bk)
            })
            .sum())
    }

    fn buffer_from(&self, field: &ScalarField) -> Vec<f64> {
        let mut buf: Vec<f64> =
            field.values().iter().zip(&self.live).map(|(&v, &l)| if l { v } else { 0.0 }).collect();
        buf.push(0.0);
        buf
    }

    fn step_count(&self, cfg: &PropagationConfig, max_rate: f64) -> Result<(usize, f64), SemigroupError> {
        let dt_max = if max_rate > 0.0 { cfg.cfl_safety / max_rate } else { cfg.horizon };
        if dt_max < cfg.min_dt {
            return Err(SemigroupError::StabilityViolation { dt: dt_max, min_dt: cfg.min_dt });
        }
        let steps = (cfg.horizon / dt_max).ceil().max(1.0) as usize;
        Ok((steps, cfg.horizon / steps as f64))
    }

    /// Explicit time loop; `gen(node, buf, d)` returns the generator value at
    /// a live node given the current buffer and its slot differences.
    fn run<L, I, G>(&self, mut cur: Vec<f64>, steps: usize, dt: f64, init: I, gen: G) -> Vec<f64>
    where
        I: Fn() -> L + Sync,
        G: Fn(usize, &[f64], &mut L) -> f64 + Sync,
    {
        let mut next = vec![0.0; self.n + 1];
        for _ in 0..steps {
            {
                let cur_ref = &cur;
                next[..self.n].par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
                    let mut d = vec![0.0; self.slots];
                    let mut local = init();
                    let start = c * CHUNK;
                    for (o, slot) in out.iter_mut().enumerate() {
                        let k = start + o;
                        *slot = if self.live[k] {
                            self.differences(k, cur_ref, &mut d);
                            cur_ref[k] + dt * gen(k, &d, &mut local)
                        } else {
                            0.0
                        };
                    }
                });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur.truncate(self.n);
        cur
    }

    /// Per-node stencil weights for a fixed policy, plus the largest CFL rate
    /// over live nodes.
    fn policy_weights(&self, policy: &PolicyTable) -> (Vec<f64>, f64) {
        let s = self.slots;
        let mut weights = vec![0.0; self.n * s];
        let rate = weights
            .par_chunks_mut(CHUNK * s)
            .enumerate()
            .map(|(c, out)| {
                let mut sc = Scratch::new(self.sys);
                let mut m: f64 = 0.0;
                for (o, w) in out.chunks_mut(s).enumerate() {
                    let k = c * CHUNK + o;
                    self.sys.grid().node_coords(k, &mut sc.x);
                    let r = self.fill_weights(policy.input(k), &mut sc, w);
                    if self.live[k] {
                        m = m.max(r);
                    }
                }
                m
            })
            .reduce(|| 0.0, f64::max);
        (weights, rate)
    }

    /// `T_t^π β` for a fixed tabulated policy.
    pub fn propagate(
        &self,
        field: &ScalarField,
        policy: &PolicyTable,
        cfg: &PropagationConfig,
    ) -> Result<ScalarField, SemigroupError> {
        cfg.validate()?;
        policy.check(self.sys)?;
        if field.spec() != self.sys.grid() {
            return Err(GridError::GridMismatch.into());
        }
        if cfg.horizon == 0.0 {
            return Ok(field.clone());
        }
        let (weights, rate) = self.policy_weights(policy);
        let (steps, dt) = self.step_count(cfg, rate)?;
        let s = self.slots;
        let out = self.run(self.buffer_from(field), steps, dt, || (), |k, d, _| {
            weights[k * s..(k + 1) * s].iter().zip(d.iter()).map(|(w, x)| w * x).sum()
        });
        Ok(ScalarField::from_raw(field.spec().clone(), out))
    }
}

/// Covariance pairs (i < j) with a nonzero entry on some probe.
fn detect_cross_pairs(sys: &SystemModel) -> Vec<(usize, usize)> {
    use rand::SeedableRng;
    let nx = sys.n_x();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xc0_55);
    let mut seen = vec![false; nx * nx];
    for _ in 0..32 {
        let x = sys.random_state(&mut rng);
        let u = sys.random_input(&mut rng);
        let a = sys.covariance(&x, &u);
        for i in 0..nx {
            for j in i + 1..nx {
                if a[i * nx + j] != 0.0 {
                    seen[i * nx + j] = true;
                }
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..nx {
        for j in i + 1..nx {
            if seen[i * nx + j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Inputs used when a property must hold for every admissible input:
/// the box center and its corners.
fn probe_inputs(sys: &SystemModel) -> Vec<Vec<f64>> {
    let n_u = sys.n_u();
    let mut out = vec![sys.input_center()];
    for mask in 0..(1usize << n_u) {
        out.push(
            (0..n_u)
                .map(|k| if mask >> k & 1 == 1 { sys.input_upper()[k] } else { sys.input_lower()[k] })
                .collect(),
        );
    }
    out
}

/// Exterior nodes, and boundary nodes where the noise has a normal component.
fn killed_mask(sys: &SystemModel, classes: &NodeClassification) -> Result<Vec<bool>, SemigroupError> {
    let spec = sys.grid();
    let nx = sys.n_x();
    let inputs = probe_inputs(sys);
    let sdf = match sys.safe_set() {
        crate::grid::ImplicitSet::SignedDistance(f) => Some(f),
        crate::grid::ImplicitSet::Box => None,
    };
    let mut killed = vec![false; spec.len()];
    let mut x = vec![0.0; nx];
    let mut multi = vec![0usize; nx];
    for k in 0..spec.len() {
        match classes.kinds[k] {
            NodeKind::Interior => continue,
            NodeKind::Exterior => {
                killed[k] = true;
                continue;
            }
            NodeKind::Boundary => {}
        }
        spec.node_coords(k, &mut x);
        spec.multi_index(k, &mut multi);
        let mut normals: Vec<Vec<f64>> = Vec::new();
        for i in 0..nx {
            if !spec.is_periodic(i) && (multi[i] == 0 || multi[i] + 1 == spec.counts()[i]) {
                let mut e = vec![0.0; nx];
                e[i] = 1.0;
                normals.push(e);
            }
        }
        if let Some(sdf) = sdf {
            let touches = (0..nx).any(|i| {
                [-1, 1].iter().any(|&d| spec.shift(k, i, d).is_some_and(|j| classes.kinds[j] == NodeKind::Exterior))
            });
            if touches {
                normals.push(crate::grid::gradient_at(sdf, &x)?);
            }
        }
        killed[k] = inputs.iter().any(|u| {
            let a = sys.covariance(&x, u);
            normals.iter().any(|n| {
                let nn: f64 = n.iter().map(|v| v * v).sum();
                let mut q = 0.0;
                for i in 0..nx {
                    for j in 0..nx {
                        q += n[i] * a[i * nx + j] * n[j];
                    }
                }
                nn > 0.0 && q > 1e-12 * nn
            })
        });
    }
    Ok(killed)
}

/// How the pointwise argmax over the input box is searched.
#[derive(Debug, Clone, PartialEq)]
enum ArgmaxMode {
    /// No inputs.
    Trivial,
    /// Affine drift, input-free noise, each drift row driven by at most one
    /// input: the upwinded generator is a separable piecewise-linear
    /// function, maximized on the product of per-input endpoints and sign
    /// breakpoints. `drivers[i]` is the input moving drift row `i`.
    PiecewiseLinear { drivers: Vec<Option<usize>> },
    /// One input, affine drift, covariance quadratic in the input: each
    /// piece between breakpoints is a parabola; its vertex is a candidate.
    PiecewiseQuadratic,
    /// Cartesian candidate grid over the input box.
    Grid,
}

fn drift_drivers(sys: &SystemModel) -> Option<Vec<Option<usize>>> {
    use rand::SeedableRng;
    let (nx, nu) = (sys.n_x(), sys.n_u());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xd1_7e);
    let mut drivers: Vec<Option<usize>> = vec![None; nx];
    for _ in 0..32 {
        let x = sys.random_state(&mut rng);
        let u = sys.random_input(&mut rng);
        let f0 = sys.drift_vec(&x, &u);
        for k in 0..nu {
            let mut up = u.clone();
            up[k] += 0.5 * (sys.input_upper()[k] - sys.input_lower()[k]).max(1e-6);
            let f1 = sys.drift_vec(&x, &up);
            for i in 0..nx {
                if (f1[i] - f0[i]).abs() > 1e-13 * (1.0 + f0[i].abs()) {
                    match drivers[i] {
                        None => drivers[i] = Some(k),
                        Some(prev) if prev == k => {}
                        Some(_) => return None,
                    }
                }
            }
        }
    }
    Some(drivers)
}

/// Checks that σσᵀ is exactly quadratic in a scalar input and diagonal.
fn covariance_quadratic_diagonal(sys: &SystemModel) -> bool {
    use rand::{Rng, SeedableRng};
    let nx = sys.n_x();
    let (lo, hi) = (sys.input_lower()[0], sys.input_upper()[0]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9a_d7);
    for _ in 0..16 {
        let x = sys.random_state(&mut rng);
        let a0 = sys.covariance(&x, &[lo]);
        let am = sys.covariance(&x, &[0.5 * (lo + hi)]);
        let a1 = sys.covariance(&x, &[hi]);
        let s: f64 = rng.random();
        let at = sys.covariance(&x, &[lo + s * (hi - lo)]);
        for e in 0..nx * nx {
            let (i, j) = (e / nx, e % nx);
            if i != j && (a0[e] != 0.0 || at[e] != 0.0) {
                return false;
            }
            let c1 = -3.0 * a0[e] + 4.0 * am[e] - a1[e];
            let c2 = 2.0 * a0[e] - 4.0 * am[e] + 2.0 * a1[e];
            let fit = a0[e] + c1 * s + c2 * s * s;
            if (fit - at[e]).abs() > 1e-9 * (1.0 + at[e].abs()) {
                return false;
            }
        }
    }
    true
}

fn choose_mode(sys: &SystemModel) -> ArgmaxMode {
    let flags = sys.flags();
    if sys.n_u() == 0 {
        return ArgmaxMode::Trivial;
    }
    if flags.input_affine {
        if let Some(drivers) = drift_drivers(sys) {
            if flags.sigma_u_independent {
                return ArgmaxMode::PiecewiseLinear { drivers };
            }
            if sys.n_u() == 1 && covariance_quadratic_diagonal(sys) {
                return ArgmaxMode::PiecewiseQuadratic;
            }
        }
    }
    ArgmaxMode::Grid
}

/// Maximizer of the discrete generator over the input box, with optional
/// per-node caching of candidate stencil weights.
pub struct OptimalStepper<'d, 'a> {
    disc: &'d Discretization<'a>,
    mode: ArgmaxMode,
    per_dim: usize,
    cache: Option<CandidateCache>,
    max_rate: f64,
}

struct CandidateCache {
    offsets: Vec<u32>,
    inputs: Vec<f64>,
    weights: Vec<f64>,
}

/// Candidate inputs at one node. For the quadratic mode the list alternates
/// knots and piece midpoints: `knot, mid, knot, ..., knot`.
fn node_candidates(sys: &SystemModel, mode: &ArgmaxMode, per_dim: usize, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_u = sys.n_u();
    let (lo, hi) = (sys.input_lower(), sys.input_upper());
    match mode {
        ArgmaxMode::Trivial => {}
        ArgmaxMode::Grid => {
            let total = per_dim.pow(n_u as u32);
            for idx in 0..total {
                let mut rem = idx;
                let mut u = vec![0.0; n_u];
                for k in (0..n_u).rev() {
                    let j = rem % per_dim;
                    rem /= per_dim;
                    u[k] = lo[k] + (hi[k] - lo[k]) * j as f64 / (per_dim - 1) as f64;
                }
                out.extend_from_slice(&u);
            }
        }
        ArgmaxMode::PiecewiseLinear { drivers } => {
            let sets = knots(sys, drivers, x);
            let total: usize = sets.iter().map(Vec::len).product();
            for idx in 0..total {
                let mut rem = idx;
                let mut u = vec![0.0; n_u];
                for k in (0..n_u).rev() {
                    let j = rem % sets[k].len();
                    rem /= sets[k].len();
                    u[k] = sets[k][j];
                }
                out.extend_from_slice(&u);
            }
        }
        ArgmaxMode::PiecewiseQuadratic => {
            let drivers = vec![Some(0); sys.n_x()];
            let ks = &knots(sys, &drivers, x)[0];
            for (i, &k) in ks.iter().enumerate() {
                if i > 0 {
                    out.push(0.5 * (ks[i - 1] + k));
                }
                out.push(k);
            }
        }
    }
}

/// Per-input sorted knot sets: box endpoints plus the inputs at which a
/// driven drift row changes sign.
fn knots(sys: &SystemModel, drivers: &[Option<usize>], x: &[f64]) -> Vec<Vec<f64>> {
    let n_u = sys.n_u();
    let (lo, hi) = (sys.input_lower(), sys.input_upper());
    let c = sys.input_center();
    let f0 = sys.drift_vec(x, &c);
    let mut sets: Vec<Vec<f64>> = (0..n_u).map(|k| vec![lo[k], hi[k]]).collect();
    for k in 0..n_u {
        let width = hi[k] - lo[k];
        if width <= 0.0 {
            sets[k].truncate(1);
            continue;
        }
        let mut up = c.clone();
        up[k] = hi[k];
        let f1 = sys.drift_vec(x, &up);
        for i in 0..sys.n_x() {
            if drivers[i] != Some(k) {
                continue;
            }
            let slope = (f1[i] - f0[i]) / (hi[k] - c[k]);
            if slope.abs() <= 1e-14 * (1.0 + f0[i].abs()) {
                continue;
            }
            let root = c[k] - f0[i] / slope;
            if root > lo[k] && root < hi[k] {
                sets[k].push(root);
            }
        }
        sets[k].sort_by(f64::total_cmp);
        sets[k].dedup();
    }
    sets
}

impl<'d, 'a> OptimalStepper<'d, 'a> {
    pub fn new(disc: &'d Discretization<'a>, cfg: &PropagationConfig) -> Result<Self, SemigroupError> {
        cfg.validate()?;
        let sys = disc.sys;
        let mode = choose_mode(sys);
        let per_dim = cfg.candidates_per_dim;
        let n = disc.n;
        let s = disc.slots;
        let n_u = sys.n_u();

        // first pass: candidate counts, and the CFL rate over all candidates
        let mut counts = vec![0u32; n];
        let rate = counts
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(c, out)| {
                let mut sc = Scratch::new(sys);
                let mut cand = Vec::new();
                let mut w = vec![0.0; s];
                let mut m: f64 = 0.0;
                for (o, cnt) in out.iter_mut().enumerate() {
                    let k = c * CHUNK + o;
                    sys.grid().node_coords(k, &mut sc.x);
                    node_candidates(sys, &mode, per_dim, &sc.x, &mut cand);
                    let nc = if n_u == 0 { 1 } else { cand.len() / n_u };
                    *cnt = nc as u32;
                    if disc.live[k] {
                        for j in 0..nc {
                            let u = &cand[j * n_u..(j + 1) * n_u];
                            let r = disc.fill_weights(u, &mut sc, &mut w);
                            m = m.max(r);
                        }
                    }
                }
                m
            })
            .reduce(|| 0.0, f64::max);

        let total: usize = counts.iter().map(|&c| c as usize).sum();
        let bytes = total * (s + n_u) * 8 + n * 4;
        let cache = if bytes <= cfg.cache_limit_bytes {
            let mut offsets = Vec::with_capacity(n + 1);
            let mut acc = 0u32;
            offsets.push(0);
            for &c in &counts {
                acc += c;
                offsets.push(acc);
            }
            let mut inputs = vec![0.0; total * n_u];
            let mut weights = vec![0.0; total * s];
            let mut sc = Scratch::new(sys);
            let mut cand = Vec::new();
            for k in 0..n {
                sys.grid().node_coords(k, &mut sc.x);
                node_candidates(sys, &mode, per_dim, &sc.x, &mut cand);
                let (a, b) = (offsets[k] as usize, offsets[k + 1] as usize);
                inputs[a * n_u..b * n_u].copy_from_slice(&cand);
                for j in a..b {
                    let u = &inputs[j * n_u..(j + 1) * n_u];
                    disc.fill_weights(u, &mut sc, &mut weights[j * s..(j + 1) * s]);
                }
            }
            Some(CandidateCache { offsets, inputs, weights })
        } else {
            None
        };
        Ok(OptimalStepper { disc, mode, per_dim, cache, max_rate: rate })
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    /// Best generator value at node `k` and the input attaining it, given
    /// slot differences `d`, candidate inputs and their weights.
    fn best(&self, d: &[f64], inputs: &[f64], weights: &[f64], u_out: Option<&mut [f64]>) -> f64 {
        let s = self.disc.slots;
        let n_u = self.disc.sys.n_u();
        let nc = weights.len() / s;
        let value = |j: usize| -> f64 { weights[j * s..(j + 1) * s].iter().zip(d).map(|(w, x)| w * x).sum() };
        let mut best_v = f64::NEG_INFINITY;
        let mut best_j = 0usize;
        let mut best_u = f64::NAN;
        match self.mode {
            ArgmaxMode::PiecewiseQuadratic => {
                // knots at even positions, midpoints at odd positions
                let mut g_prev = value(0);
                best_v = g_prev;
                let mut j = 2;
                while j < nc {
                    let gm = value(j - 1);
                    let g1 = value(j);
                    let c1 = -3.0 * g_prev + 4.0 * gm - g1;
                    let c2 = 2.0 * g_prev - 4.0 * gm + 2.0 * g1;
                    if c2 < 0.0 {
                        let t = -c1 / (2.0 * c2);
                        if t > 0.0 && t < 1.0 {
                            let v = g_prev + c1 * t + c2 * t * t;
                            if v > best_v {
                                best_v = v;
                                let (u0, u1) = (inputs[j - 2], inputs[j]);
                                best_u = u0 + t * (u1 - u0);
                                best_j = usize::MAX;
                            }
                        }
                    }
                    if g1 > best_v {
                        best_v = g1;
                        best_j = j;
                    }
                    g_prev = g1;
                    j += 2;
                }
            }
            _ => {
                for j in 0..nc {
                    let v = value(j);
                    if v > best_v {
                        best_v = v;
                        best_j = j;
                    }
                }
            }
        }
        if let Some(u) = u_out {
            if best_j == usize::MAX {
                u[0] = best_u;
            } else if n_u > 0 {
                u.copy_from_slice(&inputs[best_j * n_u..(best_j + 1) * n_u]);
            }
        }
        best_v
    }

    /// Generator maximum at node `k` over the candidates, computing weights on
    /// the fly when they are not cached.
    fn node_best(&self, k: usize, d: &[f64], local: &mut LocalBuffers, u_out: Option<&mut [f64]>) -> f64 {
        let s = self.disc.slots;
        let n_u = self.disc.sys.n_u();
        match &self.cache {
            Some(c) => {
                let (a, b) = (c.offsets[k] as usize, c.offsets[k + 1] as usize);
                self.best(d, &c.inputs[a * n_u..b * n_u], &c.weights[a * s..b * s], u_out)
            }
            None => {
                let sys = self.disc.sys;
                sys.grid().node_coords(k, &mut local.sc.x);
                node_candidates(sys, &self.mode, self.per_dim, &local.sc.x, &mut local.cand);
                let nc = if n_u == 0 { 1 } else { local.cand.len() / n_u };
                local.w.resize(nc * s, 0.0);
                for j in 0..nc {
                    let u = &local.cand[j * n_u..(j + 1) * n_u];
                    self.disc.fill_weights(u, &mut local.sc, &mut local.w[j * s..(j + 1) * s]);
                }
                self.best(d, &local.cand, &local.w, u_out)
            }
        }
    }

    /// Integrates `∂τ b = max_u 𝒜^u b` over the horizon.
    pub fn propagate(&self, field: &ScalarField, cfg: &PropagationConfig) -> Result<ScalarField, SemigroupError> {
        cfg.validate()?;
        if field.spec() != self.disc.sys.grid() {
            return Err(GridError::GridMismatch.into());
        }
        if cfg.horizon == 0.0 {
            return Ok(field.clone());
        }
        let (steps, dt) = self.disc.step_count(cfg, self.max_rate)?;
        let out = self.disc.run(
            self.disc.buffer_from(field),
            steps,
            dt,
            || LocalBuffers::new(self.disc.sys),
            |k, d, local| self.node_best(k, d, local, None),
        );
        Ok(ScalarField::from_raw(field.spec().clone(), out))
    }

    /// Pointwise argmax of the discrete generator against `field`.
    pub fn argmax_policy(&self, field: &ScalarField) -> PolicyTable {
        let sys = self.disc.sys;
        let n_u = sys.n_u();
        let mut policy = PolicyTable::centered(sys);
        if n_u == 0 {
            return policy;
        }
        let buf = self.disc.buffer_from(field);
        let mut inputs = vec![0.0; self.disc.n * n_u];
        inputs.par_chunks_mut(CHUNK * n_u).enumerate().for_each(|(c, out)| {
            let mut local = LocalBuffers::new(sys);
            let mut d = vec![0.0; self.disc.slots];
            for (o, u) in out.chunks_mut(n_u).enumerate() {
                let k = c * CHUNK + o;
                self.disc.differences(k, &buf, &mut d);
                self.node_best(k, &d, &mut local, Some(u));
            }
        });
        for k in 0..self.disc.n {
            policy.set(k, &inputs[k * n_u..(k + 1) * n_u]);
        }
        policy
    }

    /// Argmax policy that keeps `current` wherever no candidate is strictly
    /// better than the current input.
    pub fn improve_policy(&self, field: &ScalarField, current: &PolicyTable) -> PolicyTable {
        let sys = self.disc.sys;
        let n_u = sys.n_u();
        let best = self.argmax_policy(field);
        if n_u == 0 {
            return best;
        }
        let buf = self.disc.buffer_from(field);
        let mut out = current.clone();
        let mut sc = Scratch::new(sys);
        let mut w = vec![0.0; self.disc.slots];
        let mut d = vec![0.0; self.disc.slots];
        let mut value = |k: usize, u: &[f64], sc: &mut Scratch| {
            sys.grid().node_coords(k, &mut sc.x);
            self.disc.fill_weights(u, sc, &mut w);
            self.disc.differences(k, &buf, &mut d);
            w.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()
        };
        for k in 0..self.disc.n {
            let vc = value(k, current.input(k), &mut sc);
            let vb = value(k, best.input(k), &mut sc);
            if vb > vc + 1e-12 * (1.0 + vc.abs()) {
                out.set(k, best.input(k));
            }
        }
        out
    }
}

struct LocalBuffers {
    sc: Scratch,
    cand: Vec<f64>,
    w: Vec<f64>,
}

impl LocalBuffers {
    fn new(sys: &SystemModel) -> Self {
        LocalBuffers { sc: Scratch::new(sys), cand: Vec::new(), w: Vec::new() }
    }
}

/// Discrete generator `𝒜^u β` at an interior node.
pub fn apply_generator(
    field: &ScalarField,
    sys: &SystemModel,
    u: &[f64],
    node: usize,
) -> Result<f64, SemigroupError> {
    Discretization::new(sys)?.generator(field, u, node)
}

/// `T_t^π β` under a tabulated policy.
pub fn propagate(
    field: &ScalarField,
    sys: &SystemModel,
    policy: &PolicyTable,
    cfg: &PropagationConfig,
) -> Result<ScalarField, SemigroupError> {
    Discretization::new(sys)?.propagate(field, policy, cfg)
}

/// `T_t β` with the pointwise-optimal input at every step, and the argmax
/// policy against the propagated field.
pub fn propagate_optimal(
    field: &ScalarField,
    sys: &SystemModel,
    cfg: &PropagationConfig,
) -> Result<(ScalarField, PolicyTable), SemigroupError> {
    let disc = Discretization::new(sys)?;
    let stepper = OptimalStepper::new(&disc, cfg)?;
    let out = stepper.propagate(field, cfg)?;
    let policy = stepper.argmax_policy(&out);
    Ok((out, policy))
}
