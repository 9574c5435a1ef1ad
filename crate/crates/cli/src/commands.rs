use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use scbf_core::filter::FilterSpec;
use scbf_core::grid::{sup_norm, ScalarField};
use scbf_core::montecarlo::{
    estimate_safety_curve, fit_decay_rate, simulate as simulate_trial, write_curve_csv, write_trajectory_csv,
    Controller, Reference, SafetyCurve, SimConfig, TheoreticalBound,
};
use scbf_core::semigroup::{Discretization, PolicyTable, PropagationConfig};
use scbf_core::spectral::{
    coarse_to_fine, default_init, eigen_residual, power_iteration, power_policy_iteration_with, recompute_gamma,
    resample, EigenResult, SpectralError,
};
use scbf_core::systems::{BenchmarkId, SystemModel};
use serde::Serialize;

use crate::artifacts::{load_synthesis, read_field, write_json, write_synthesis, Artifacts, GridInfo};
use crate::config::{ControllerKind, InitKind, JobConfig, ReferenceKind};

/// Non-error outcomes with their own exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
    ChecksFailed,
}

pub const SIM_META: &str = "simulation.json";
pub const FILTER_META: &str = "filter.json";
pub const REPORT: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const FILTERED_FILE: &str = "filtered.csv";

fn run_synthesis(cfg: &JobConfig, sys: &SystemModel) -> Result<Result<EigenResult, SpectralError>> {
    let it = &cfg.iteration;
    let prop = &cfg.propagation;
    if it.coarse_to_fine {
        return Ok(coarse_to_fine(sys, prop, it.tol, it.max_iter, it.update));
    }
    let init = match it.init {
        InitKind::Bump => default_init(sys.grid()),
        InitKind::Constant => ScalarField::constant(sys.grid().clone(), 1.0),
        InitKind::Warm => {
            let path = it.warm_start.as_ref().context("iteration.warm_start is not set")?;
            resample(&read_field(path)?, sys.grid())?
        }
    };
    let centered = PolicyTable::centered(sys);
    Ok(if sys.n_u() == 0 {
        power_iteration(sys, &centered, prop, &init, it.tol, it.max_iter)
    } else {
        power_policy_iteration_with(sys, prop, &init, &centered, it.tol, it.max_iter, it.update)
    })
}

pub fn synthesize(cfg: &JobConfig) -> Result<Outcome> {
    let sys = cfg.build_system()?;
    let dir = &cfg.output.dir;
    let (result, outcome) = match run_synthesis(cfg, &sys)? {
        Ok(r) => (r, Outcome::Success),
        Err(SpectralError::NotConverged(partial)) => (*partial, Outcome::NotConverged),
        Err(e) => return Err(e.into()),
    };
    write_synthesis(dir, cfg, &sys, &result)?;
    println!(
        "{}: gamma = {:.6e}, iterations = {}, residual = {:.3e}, converged = {}",
        sys.name(),
        result.gamma,
        result.iterations(),
        result.final_residual(),
        result.converged
    );
    println!("wrote {}", dir.display());
    Ok(outcome)
}

fn grid_center(sys: &SystemModel) -> Vec<f64> {
    let g = sys.grid();
    g.lower().iter().zip(g.upper()).map(|(a, b)| 0.5 * (a + b)).collect()
}

fn reference(cfg: &JobConfig, sys: &SystemModel) -> Result<(Reference, ReferenceEcho)> {
    let s = &cfg.simulation;
    let kind = s.reference.unwrap_or(if cfg.system.name == BenchmarkId::Bicycle {
        ReferenceKind::CircleTracking
    } else {
        ReferenceKind::Constant
    });
    match kind {
        ReferenceKind::CircleTracking => {
            if sys.n_x() != 4 || sys.n_u() != 2 {
                bail!("circle_tracking needs the 4-state, 2-input bicycle model");
            }
            let echo = ReferenceEcho { kind, input: None };
            Ok((Reference::CircleTracking(s.circle), echo))
        }
        ReferenceKind::Constant => {
            let u = match &s.input {
                Some(u) => u.clone(),
                None if cfg.system.name == BenchmarkId::WigAircraft => vec![0.03, 300.0],
                None => sys.input_center(),
            };
            check_input_len(sys, &u)?;
            Ok((Reference::Constant(u.clone()), ReferenceEcho { kind, input: Some(u) }))
        }
    }
}

fn check_input_len(sys: &SystemModel, u: &[f64]) -> Result<()> {
    if u.len() != sys.n_u() {
        bail!("input has {} entries, the system has {} inputs", u.len(), sys.n_u());
    }
    Ok(())
}

fn filter_spec(cfg: &JobConfig, sys: &SystemModel, art: &Artifacts) -> Result<FilterSpec> {
    let r = &art.result;
    let gamma = cfg.filter.gamma.unwrap_or(r.gamma);
    Ok(FilterSpec::from_parts(sys, r.psi.clone(), r.policy.clone(), r.gamma, gamma, cfg.filter.weight.clone())?)
}

/// The reference law actually used, after defaults are applied.
#[derive(Serialize)]
struct ReferenceEcho {
    kind: ReferenceKind,
    input: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SimMetadata<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a JobConfig,
    system: String,
    grid: GridInfo,
    x0: Vec<f64>,
    controller: ControllerKind,
    reference: Option<ReferenceEcho>,
    /// Decay rate and ψ(x₀)/ψ_max of the lower bound, when one applies.
    bound_gamma: Option<f64>,
    bound_ratio: Option<f64>,
    bound_holds: Option<bool>,
    final_time: f64,
    final_survival: f64,
    final_ci: (f64, f64),
    fitted_rate: Option<f64>,
    exit_monitoring: &'static str,
    files: Vec<String>,
}

/// True when survival plus the Wilson half-width stays above the bound.
pub fn bound_holds(curve: &SafetyCurve) -> Option<bool> {
    let bound = curve.theoretical_bound.as_ref()?;
    Some((0..curve.times.len()).all(|j| {
        let half = 0.5 * (curve.wilson_ci_high[j] - curve.wilson_ci_low[j]);
        curve.survival_fraction[j] + half >= bound[j]
    }))
}

pub fn simulate(cfg: &JobConfig, psi_dir: &Path) -> Result<Outcome> {
    let sys = cfg.build_system()?;
    let s = &cfg.simulation;
    let art = match s.controller {
        ControllerKind::FixedPolicy | ControllerKind::ScbfQp => Some(load_synthesis(psi_dir, &sys)?),
        ControllerKind::OpenLoop | ControllerKind::Unfiltered => None,
    };
    let x0 = match (&s.x0, &art) {
        (Some(x), _) => x.clone(),
        (None, Some(a)) => sys.grid().node_point(a.result.psi.argmax()),
        (None, None) => grid_center(&sys),
    };
    let mut echo = None;
    let (controller, bound) = match s.controller {
        ControllerKind::FixedPolicy => {
            let a = art.as_ref().expect("loaded above");
            (Controller::FixedPolicy(a.result.policy.clone()), Some(TheoreticalBound::from_eigen(&a.result, &x0)?))
        }
        ControllerKind::ScbfQp => {
            let spec = filter_spec(cfg, &sys, art.as_ref().expect("loaded above"))?;
            let bound = TheoreticalBound::from_filter(&spec, &x0)?;
            let (reference, e) = reference(cfg, &sys)?;
            echo = Some(e);
            (Controller::ScbfQp { filter: Box::new(spec), reference }, Some(bound))
        }
        ControllerKind::OpenLoop => {
            let u = s.input.clone().unwrap_or_else(|| sys.input_center());
            check_input_len(&sys, &u)?;
            (Controller::OpenLoop(u), None)
        }
        ControllerKind::Unfiltered => {
            let (reference, e) = reference(cfg, &sys)?;
            echo = Some(e);
            (Controller::Unfiltered(reference), None)
        }
    };
    let sim = SimConfig { dt: s.dt, t_end: s.t_end, trials: s.trials, seed: s.seed, sample_dt: s.sample_dt, controller };

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let curve = estimate_safety_curve(&sys, &sim, &x0, bound)?;
    let mut files = vec![CURVE_FILE.to_string()];
    write_curve_csv(&curve, create(&dir.join(CURVE_FILE))?)?;
    for trial in 0..s.trajectories.min(s.trials) {
        let name = format!("trajectory_{trial}.csv");
        let traj = simulate_trial(&sys, &sim, &x0, trial)?;
        write_trajectory_csv(&traj, create(&dir.join(&name))?)?;
        files.push(name);
    }
    let fitted_rate = fit_decay_rate(&curve, s.fit_window).ok();
    let last = curve.times.len() - 1;
    let meta = SimMetadata {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        system: sys.name().into(),
        grid: GridInfo::of(&sys),
        x0,
        controller: s.controller,
        reference: echo,
        bound_gamma: bound.map(|b| b.gamma),
        bound_ratio: bound.map(|b| b.ratio),
        bound_holds: bound_holds(&curve),
        final_time: curve.times[last],
        final_survival: curve.survival_fraction[last],
        final_ci: (curve.wilson_ci_low[last], curve.wilson_ci_high[last]),
        fitted_rate,
        exit_monitoring: "safe-set exit tested at every Euler-Maruyama step only; sub-step crossings are missed (bias O(sqrt(dt)))",
        files,
    };
    write_json(&dir.join(SIM_META), &meta)?;
    println!(
        "survival at t = {}: {:.4} [{:.4}, {:.4}]",
        meta.final_time, meta.final_survival, meta.final_ci.0, meta.final_ci.1
    );
    if let Some(rate) = fitted_rate {
        println!("fitted decay rate: {rate:.4}");
    }
    if let Some(ok) = meta.bound_holds {
        println!("lower bound respected: {ok}");
    }
    Ok(Outcome::Success)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

#[derive(Serialize)]
struct FilterMetadata<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a JobConfig,
    queries: String,
    gamma: f64,
    gamma_pi: f64,
    status_counts: BTreeMap<&'static str, usize>,
    files: Vec<String>,
}

/// Answers `(t, x, u_ref)` queries from a CSV with a header row.
pub fn filter(cfg: &JobConfig, psi_dir: &Path, queries: &Path) -> Result<Outcome> {
    let sys = cfg.build_system()?;
    let art = load_synthesis(psi_dir, &sys)?;
    let spec = filter_spec(cfg, &sys, &art)?;
    let (nx, nu) = (sys.n_x(), sys.n_u());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(queries)
        .with_context(|| format!("opening {}", queries.display()))?;

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = create(&dir.join(FILTERED_FILE))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=nu).map(|i| format!("u{i}")));
    header.extend(["status".to_string(), "margin".to_string()]);
    writeln!(out, "{}", header.join(","))?;

    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", queries.display(), row + 2))?;
        if record.len() != 1 + nx + nu {
            bail!("{}: row {} has {} columns, expected t, {nx} states and {nu} inputs", queries.display(), row + 2, record.len());
        }
        let vals = record
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {}", queries.display(), row + 2))?;
        let (x, u_ref) = (&vals[1..1 + nx], &vals[1 + nx..]);
        let mut line = vec![format!("{:e}", vals[0])];
        if !sys.in_safe_set(x) {
            line.extend(std::iter::repeat_n(String::new(), nu));
            line.extend(["out_of_domain".to_string(), String::new()]);
            *counts.entry("out_of_domain").or_default() += 1;
        } else {
            let res = spec.filter_input(x, u_ref)?;
            line.extend(res.u.iter().map(|v| format!("{v:e}")));
            line.extend([res.status.name().to_string(), format!("{:e}", res.margin)]);
            *counts.entry(res.status.name()).or_default() += 1;
        }
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    let meta = FilterMetadata {
        command: "filter",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        queries: queries.display().to_string(),
        gamma: spec.gamma(),
        gamma_pi: spec.gamma_pi(),
        status_counts: counts,
        files: vec![FILTERED_FILE.into()],
    };
    write_json(&dir.join(FILTER_META), &meta)?;
    for (status, n) in &meta.status_counts {
        println!("{status}: {n}");
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: Option<String>,
}

impl Check {
    fn new(name: &'static str, passed: bool, value: Option<f64>, threshold: Option<f64>) -> Self {
        Check { name, passed, value, threshold, detail: None }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display) -> Self {
        Check { name, passed: false, value: None, threshold: None, detail: Some(err.to_string()) }
    }
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a JobConfig,
    artifacts: String,
    gamma: f64,
    passed: bool,
    checks: Vec<Check>,
}

pub fn verify_checks(cfg: &JobConfig, sys: &SystemModel, result: &EigenResult) -> Vec<Check> {
    let psi = &result.psi;
    let vals = psi.values();
    let mut checks = vec![Check::new("converged", result.converged, None, None)];
    let finite = vals.iter().all(|v| v.is_finite());
    checks.push(Check::new("finite", finite, None, None));
    checks.push(Check::new("positivity", psi.min() >= 0.0, Some(psi.min()), Some(0.0)));
    let norm = sup_norm(psi);
    checks.push(Check::new("normalized", (norm - 1.0).abs() <= 1e-12, Some(norm), Some(1.0)));
    match Discretization::new(sys) {
        Ok(disc) => {
            let worst = (0..vals.len()).filter(|&k| disc.is_killed(k)).map(|k| vals[k].abs()).fold(0.0, f64::max);
            checks.push(Check::new("boundary_zeros", worst == 0.0, Some(worst), Some(0.0)));
        }
        Err(e) => checks.push(Check::failed("boundary_zeros", e)),
    }
    if !finite {
        return checks;
    }
    let prop = PropagationConfig { horizon: result.horizon, ..cfg.propagation.clone() };
    let tol = cfg.verify.residual_tol;
    match eigen_residual(result, sys, &prop) {
        Ok(r) => checks.push(Check::new("residual", r < tol, Some(r), Some(tol))),
        Err(e) => checks.push(Check::failed("residual", e)),
    }
    let doubled = PropagationConfig { horizon: 2.0 * result.horizon, ..prop };
    let htol = cfg.verify.horizon_tol;
    match recompute_gamma(result, sys, &doubled) {
        Ok(g) => {
            let rel = (g - result.gamma).abs() / result.gamma.abs().max(f64::MIN_POSITIVE);
            checks.push(Check::new("horizon_invariance", rel < htol, Some(rel), Some(htol)));
        }
        Err(e) => checks.push(Check::failed("horizon_invariance", e)),
    }
    checks
}

pub fn verify(cfg: &JobConfig, psi_dir: &Path) -> Result<Outcome> {
    let sys = cfg.build_system()?;
    let art = load_synthesis(psi_dir, &sys)?;
    let checks = verify_checks(cfg, &sys, &art.result);
    let passed = checks.iter().all(|c| c.passed);
    for c in &checks {
        let value = c.value.map_or(String::new(), |v| format!(" ({v:.3e})"));
        println!("{} {}{}", if c.passed { "PASS" } else { "FAIL" }, c.name, value);
    }
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let report = Report {
        command: "verify",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        artifacts: art.dir.display().to_string(),
        gamma: art.result.gamma,
        passed,
        checks,
    };
    write_json(&dir.join(REPORT), &report)?;
    Ok(if passed { Outcome::Success } else { Outcome::ChecksFailed })
}
