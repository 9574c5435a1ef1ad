use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use scbf_core::filter::{FilterError, FilterSpec, FilterStatus, FEASIBILITY_SLACK};
use scbf_core::grid::{gradient_at, hessian_at, NodeKind, ScalarField};
use scbf_core::semigroup::{Discretization, PolicyTable, PropagationConfig};
use scbf_core::spectral::{default_init, power_policy_iteration, EigenResult};
use scbf_core::systems::{make_benchmark, BenchmarkId, SystemModel};

fn bench(id: BenchmarkId, counts: &[usize]) -> SystemModel {
    make_benchmark(id, &BTreeMap::new()).unwrap().with_resolution(counts).unwrap()
}

fn synthesize(sys: &SystemModel) -> EigenResult {
    power_policy_iteration(sys, &PropagationConfig::default(), &default_init(sys.grid()), &PolicyTable::centered(sys), 1e-5, 500)
        .unwrap()
}

fn omni() -> &'static (SystemModel, EigenResult) {
    static CELL: OnceLock<(SystemModel, EigenResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let sys = bench(BenchmarkId::DiOmni, &[41, 81]);
        let r = synthesize(&sys);
        (sys, r)
    })
}

fn bicycle() -> &'static (SystemModel, EigenResult) {
    static CELL: OnceLock<(SystemModel, EigenResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let sys = bench(BenchmarkId::Bicycle, &[21, 21, 12, 9]);
        let r = synthesize(&sys);
        (sys, r)
    })
}

fn quadratic_psi(sys: &SystemModel) -> ScalarField {
    ScalarField::from_fn(sys.grid().clone(), |x| {
        2.0 + 0.1 * x[0] + 0.2 * x[1] - 0.3 * x[0] * x[0] - 0.1 * x[1] * x[1] + 0.05 * x[0] * x[1]
    })
    .unwrap()
}

#[test]
fn omni_coefficients_follow_the_ito_expansion() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let psi = quadratic_psi(&sys);
    let gamma = 0.7;
    let f = FilterSpec::from_parts(&sys, psi.clone(), PolicyTable::centered(&sys), 0.5, gamma, None).unwrap();
    let x = [0.3, -0.6];
    let c = f.generator_coefficients(&x).unwrap();
    // exact derivatives of the quadratic
    let p1 = 0.1 - 0.6 * x[0] + 0.05 * x[1];
    let p2 = 0.2 - 0.2 * x[1] + 0.05 * x[0];
    let psi_x = 2.0 + 0.1 * x[0] + 0.2 * x[1] - 0.3 * x[0] * x[0] - 0.1 * x[1] * x[1] + 0.05 * x[0] * x[1];
    assert!(c.exact && c.a_quad.is_none());
    assert!((c.a_lin[0] - p2).abs() < 1e-9, "{:?}", c.a_lin);
    let a0 = p1 * x[1] + 0.5 * (-0.6 - 0.2) + gamma * psi_x;
    assert!((c.a0 - a0).abs() < 1e-9, "{} vs {a0}", c.a0);
    // same decomposition from the library's own derivative estimates
    let g = gradient_at(&psi, &x).unwrap();
    let h = hessian_at(&psi, &x).unwrap();
    assert!((c.a_lin[0] - g[1]).abs() < 1e-12);
    assert!((c.a0 - (g[0] * x[1] + 0.5 * (h[0] + h[3]) + gamma * psi_x)).abs() < 1e-9);
}

#[test]
fn zero_field_gives_zero_coefficients() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let f = FilterSpec::from_parts(&sys, ScalarField::zeros(sys.grid().clone()), PolicyTable::centered(&sys), 0.0, 0.0, None)
        .unwrap();
    let c = f.generator_coefficients(&[0.1, 0.2]).unwrap();
    assert_eq!((c.a0, c.a_lin.clone()), (0.0, vec![0.0]));
    let out = f.filter_input(&[0.1, 0.2], &[0.9]).unwrap();
    assert_eq!((out.u, out.status), (vec![0.9], FilterStatus::Unmodified));
}

#[test]
fn input_noise_has_a_quadratic_term() {
    let sys = bench(BenchmarkId::DiInputNoise, &[21, 41]);
    let psi = quadratic_psi(&sys);
    let f = FilterSpec::from_parts(&sys, psi, PolicyTable::centered(&sys), 0.0, 0.1, None).unwrap();
    let c = f.generator_coefficients(&[0.2, 0.4]).unwrap();
    let q = c.a_quad.expect("quadratic term");
    assert!(c.exact);
    // one half of psi_vv = -0.2
    assert!((q[0] - (-0.1)).abs() < 1e-9, "{q:?}");
}

#[test]
fn wig_coefficients_are_a_linearization() {
    let sys = bench(BenchmarkId::WigAircraft, &[9, 9, 9]);
    let psi = default_init(sys.grid());
    let f = FilterSpec::from_parts(&sys, psi, PolicyTable::centered(&sys), 0.0, 0.01, None).unwrap();
    let c = f.generator_coefficients(&[4.0, 45.0, 0.0]).unwrap();
    assert!(!c.exact);
}

#[test]
fn slack_constraint_leaves_the_reference_alone() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let f = FilterSpec::from_parts(&sys, quadratic_psi(&sys), PolicyTable::centered(&sys), 0.0, 50.0, None).unwrap();
    let out = f.filter_input(&[0.1, 0.1], &[0.4]).unwrap();
    assert_eq!((out.u, out.status), (vec![0.4], FilterStatus::Unmodified));
}

#[test]
fn scalar_affine_constraint_projects_onto_the_half_line() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    // psi = 1 + x2 gives a0 = gamma * psi, a1 = 1
    let psi = ScalarField::from_fn(sys.grid().clone(), |x| 3.0 + x[1]).unwrap();
    let f = FilterSpec::from_parts(&sys, psi, PolicyTable::centered(&sys), 0.0, 0.1, None).unwrap();
    let x = [0.0, 0.5];
    let c = f.generator_coefficients(&x).unwrap();
    let threshold = -c.a0 / c.a_lin[0];
    assert!((threshold - (-0.35)).abs() < 1e-12);
    let out = f.filter_input(&x, &[-0.9]).unwrap();
    assert_eq!(out.status, FilterStatus::Modified);
    assert!((out.u[0] - threshold).abs() < 1e-12);
}

#[test]
fn infeasible_constraint_falls_back_to_the_backup_policy() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    // with gamma = 0 the constraint reads x2 + u >= 0
    let psi = ScalarField::from_fn(sys.grid().clone(), |x| 3.0 + x[0] + x[1]).unwrap();
    let backup = PolicyTable::constant(&sys, &[1.0]);
    let f = FilterSpec::from_parts(&sys, psi.clone(), backup, 0.0, 0.0, None).unwrap();
    let x = [0.0, -1.4];
    let out = f.filter_input(&x, &[0.0]).unwrap();
    assert_eq!(out.status, FilterStatus::InfeasibleFallback);
    assert_eq!(out.u, vec![1.0]);
    let f = FilterSpec::from_parts(&sys, psi, PolicyTable::constant(&sys, &[1.0]), 0.0, 0.0, None).unwrap();
    let out = f.filter_input(&[0.0, -0.8], &[-1.0]).unwrap();
    assert_eq!(out.status, FilterStatus::Modified);
    assert!((out.u[0] - 0.8).abs() < 1e-12);
}

#[test]
fn backup_status_when_the_solver_finds_nothing_but_the_backup_holds() {
    let sys = bench(BenchmarkId::WigAircraft, &[9, 9, 9]);
    let psi = default_init(sys.grid());
    let f = FilterSpec::from_parts(&sys, psi, PolicyTable::centered(&sys), 0.0, 0.0, None).unwrap();
    // the backup is consulted only when the search fails; the outcome is always admissible
    let x = [5.0, 45.0, 0.0];
    let out = f.filter_input(&x, &[0.03, 300.0]).unwrap();
    assert!(out.margin >= -FEASIBILITY_SLACK || out.status == FilterStatus::InfeasibleFallback);
}

#[test]
fn wig_search_returns_feasible_inputs() {
    let sys = bench(BenchmarkId::WigAircraft, &[9, 9, 9]);
    let psi = default_init(sys.grid());
    let f = FilterSpec::from_parts(&sys, psi, PolicyTable::centered(&sys), 0.0, 0.01, None).unwrap();
    let mut modified = 0;
    for (h, v, g) in [(2.0, 30.0, 0.05), (8.0, 60.0, -0.1), (5.0, 45.0, 0.0), (1.5, 25.0, -0.12), (9.0, 65.0, 0.1)] {
        let out = f.filter_input(&[h, v, g], &[0.03, 300.0]).unwrap();
        if matches!(out.status, FilterStatus::Unmodified | FilterStatus::Modified | FilterStatus::Backup) {
            assert!(out.margin >= -FEASIBILITY_SLACK, "{out:?}");
        }
        if out.status == FilterStatus::Modified {
            modified += 1;
        }
    }
    assert!(modified > 0);
}

#[test]
fn gamma_below_the_eigenvalue_is_refused() {
    let (sys, r) = omni();
    let err = FilterSpec::new(r, sys, 0.5 * r.gamma, None).unwrap_err();
    assert!(matches!(err, FilterError::GammaBelowEigen { .. }));
    assert!(FilterSpec::new(r, sys, r.gamma, Some(vec![0.0])).is_err());
    assert!(FilterSpec::new(r, sys, r.gamma, None).is_ok());
}

#[test]
fn states_outside_the_safe_set_are_rejected() {
    let (sys, r) = bicycle();
    let f = FilterSpec::new(r, sys, 0.15, None).unwrap();
    assert_eq!(f.filter_input(&[0.2, 0.0, 0.0, 1.0], &[0.0, 0.0]), Err(FilterError::OutsideSafeSet));
    assert_eq!(f.filter_input(&[3.5, 0.0, 0.0, 1.0], &[0.0, 0.0]), Err(FilterError::OutsideSafeSet));
}

#[test]
fn backup_policy_satisfies_the_condition_at_nodes() {
    let (sys, r) = omni();
    let f = FilterSpec::new(r, sys, r.gamma, None).unwrap();
    let disc = Discretization::new(sys).unwrap();
    let h = (0..2).map(|i| sys.grid().spacing(i)).fold(0.0, f64::max);
    for k in 0..sys.grid().len() {
        if disc.classes().kinds[k] != NodeKind::Interior {
            continue;
        }
        let x = sys.grid().node_point(k);
        // the discrete relation holds exactly; interpolated derivatives differ by O(h)
        let discrete = disc.generator(&r.psi, r.policy.input(k), k).unwrap() + r.gamma * r.psi.values()[k];
        assert!(discrete >= -1e-9, "node {k}: {discrete}");
        assert!(f.margin(&x, r.policy.input(k)).unwrap() >= -h, "node {k}");
    }
}

fn omni_state() -> impl Strategy<Value = Vec<f64>> {
    (-0.97f64..0.97, -1.95f64..1.95).prop_map(|(a, b)| vec![a, b])
}

fn bicycle_state() -> impl Strategy<Value = Vec<f64>> {
    (1.05f64..2.95, 0.0f64..6.28, -3.1f64..3.1, -1.9f64..1.9).prop_map(|(r, phi, th, v)| {
        vec![r.min(2.9) * phi.cos(), r.min(2.9) * phi.sin(), th, v]
    })
}

fn check_minimal(f: &FilterSpec, sys: &SystemModel, x: &[f64], u_ref: &[f64]) -> Result<(), TestCaseError> {
    let out = f.filter_input(x, u_ref).unwrap();
    if out.status != FilterStatus::Modified {
        return Ok(());
    }
    let n: usize = 201;
    let (lo, hi) = (sys.input_lower().to_vec(), sys.input_upper().to_vec());
    let cell: Vec<f64> = (0..sys.n_u()).map(|k| (hi[k] - lo[k]) / (n - 1) as f64).collect();
    let total = n.pow(sys.n_u() as u32);
    let dist = |u: &[f64]| u.iter().zip(u_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for idx in 0..total {
        let mut rem = idx;
        let u: Vec<f64> = (0..sys.n_u())
            .map(|k| {
                let j = rem % n;
                rem /= n;
                lo[k] + cell[k] * j as f64
            })
            .collect();
        if f.margin(x, &u).unwrap() >= -FEASIBILITY_SLACK {
            let d = dist(&u);
            if best.as_ref().is_none_or(|(b, _)| d < *b) {
                best = Some((d, u));
            }
        }
    }
    let (d_grid, _) = best.expect("grid search finds a feasible input");
    let cell_diag = cell.iter().map(|c| c * c).sum::<f64>().sqrt();
    prop_assert!(dist(&out.u) <= d_grid + 1e-9, "filter {} grid {d_grid}", dist(&out.u));
    prop_assert!(d_grid - dist(&out.u) <= cell_diag);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_is_idempotent(x in omni_state(), u_ref in -2.0f64..2.0, dg in 0.0f64..2.0) {
        let (sys, r) = omni();
        let f = FilterSpec::new(r, sys, r.gamma + dg, None).unwrap();
        let first = f.filter_input(&x, &[u_ref]).unwrap();
        if first.status != FilterStatus::InfeasibleFallback {
            let second = f.filter_input(&x, &first.u).unwrap();
            prop_assert_eq!(second.status, FilterStatus::Unmodified);
            prop_assert_eq!(second.u, first.u);
        }
    }

    #[test]
    fn bicycle_filtering_is_idempotent(x in bicycle_state(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (sys, r) = bicycle();
        let f = FilterSpec::new(r, sys, 0.15, None).unwrap();
        let first = f.filter_input(&x, &[a, b]).unwrap();
        if first.status != FilterStatus::InfeasibleFallback {
            let second = f.filter_input(&x, &first.u).unwrap();
            prop_assert_eq!(second.status, FilterStatus::Unmodified);
            prop_assert_eq!(second.u, first.u);
        }
    }

    #[test]
    fn omni_filter_is_the_nearest_feasible_input(x in omni_state(), u_ref in -1.5f64..1.5) {
        let (sys, r) = omni();
        let f = FilterSpec::new(r, sys, r.gamma, None).unwrap();
        check_minimal(&f, sys, &x, &[u_ref])?;
    }

    #[test]
    fn bicycle_filter_is_the_nearest_feasible_input(x in bicycle_state(), a in -1.5f64..1.5, b in -1.5f64..1.5) {
        let (sys, r) = bicycle();
        let f = FilterSpec::new(r, sys, 0.15, None).unwrap();
        check_minimal(&f, sys, &x, &[a, b])?;
    }

    #[test]
    fn larger_gamma_is_never_more_restrictive(x in omni_state(), u in -1.0f64..1.0, dg in 0.0f64..3.0) {
        let (sys, r) = omni();
        let low = FilterSpec::new(r, sys, r.gamma, None).unwrap();
        let high = low.with_gamma(r.gamma + dg).unwrap();
        prop_assert!(high.margin(&x, &[u]).unwrap() >= low.margin(&x, &[u]).unwrap());
        let cl = low.generator_coefficients(&x).unwrap();
        let ch = high.generator_coefficients(&x).unwrap();
        prop_assert!(ch.a0 >= cl.a0);
    }
}
