use std::collections::BTreeMap;
use std::f64::consts::PI;

use proptest::prelude::*;
use scbf_core::grid::{sup_distance, sup_norm, ScalarField};
use scbf_core::semigroup::{
    apply_generator, propagate, propagate_optimal, Discretization, PolicyTable, PropagationConfig, SemigroupError,
};
use scbf_core::systems::{make_benchmark, BenchmarkId, SystemModel};

fn bench(id: BenchmarkId, counts: &[usize]) -> SystemModel {
    make_benchmark(id, &BTreeMap::new()).unwrap().with_resolution(counts).unwrap()
}

fn sine_mode(sys: &SystemModel) -> ScalarField {
    ScalarField::from_fn(sys.grid().clone(), |x| (PI * (x[0] + 1.0) / 2.0).sin()).unwrap()
}

#[test]
fn brownian_sine_decays_at_the_dirichlet_rate() {
    let sys = bench(BenchmarkId::Brownian1d, &[201]);
    let beta = sine_mode(&sys);
    let t = 0.5;
    let out = propagate(&beta, &sys, &PolicyTable::centered(&sys), &PropagationConfig::with_horizon(t)).unwrap();
    let expected = beta.scaled((-PI * PI / 8.0 * t).exp());
    let err = sup_distance(&out, &expected).unwrap();
    assert!(err < 0.01 * sup_norm(&expected), "err {err}");
}

#[test]
fn generator_of_quadratic_on_omni_double_integrator() {
    let sys = bench(BenchmarkId::DiOmni, &[81, 161]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| x[0] * x[0] + x[1] * x[1]).unwrap();
    let node = sys.grid().flat_index(&[60, 120]);
    assert_eq!(sys.grid().node_point(node), vec![0.5, 1.0]);
    let g = apply_generator(&beta, &sys, &[0.0], node).unwrap();
    // forward difference of x1^2 over h = 0.025 adds h to the exact 3.0
    assert!((g - 3.0).abs() <= 0.026, "g {g}");
}

#[test]
fn generator_of_constant_patch_is_zero() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let beta = ScalarField::constant(sys.grid().clone(), 2.5);
    let node = sys.grid().flat_index(&[10, 20]);
    assert_eq!(sys.grid().node_point(node), vec![0.0, 0.0]);
    assert_eq!(apply_generator(&beta, &sys, &[0.3], node).unwrap(), 0.0);
}

#[test]
fn generator_of_brownian_sine_at_midpoint() {
    let sys = bench(BenchmarkId::Brownian1d, &[201]);
    let g = apply_generator(&sine_mode(&sys), &sys, &[], 100).unwrap();
    let exact = -PI * PI / 8.0;
    let h: f64 = 0.01;
    assert!((g - exact).abs() < 5.0 * h * h, "g {g}");
}

#[test]
fn generator_rejects_boundary_nodes() {
    let sys = bench(BenchmarkId::Brownian1d, &[51]);
    let beta = sine_mode(&sys);
    assert_eq!(apply_generator(&beta, &sys, &[], 0), Err(SemigroupError::NotInterior(0)));
    assert_eq!(apply_generator(&beta, &sys, &[], 50), Err(SemigroupError::NotInterior(50)));
}

#[test]
fn zero_horizon_is_identity() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| (x[0] + 2.0) * (x[1] + 3.0)).unwrap();
    let out = propagate(&beta, &sys, &PolicyTable::centered(&sys), &PropagationConfig::with_horizon(0.0)).unwrap();
    assert_eq!(out, beta);
}

#[test]
fn tiny_step_floor_is_reported() {
    let sys = bench(BenchmarkId::DiOmni, &[81, 161]);
    let cfg = PropagationConfig { min_dt: 1e-2, ..PropagationConfig::with_horizon(0.1) };
    let beta = ScalarField::constant(sys.grid().clone(), 1.0);
    let err = propagate(&beta, &sys, &PolicyTable::centered(&sys), &cfg).unwrap_err();
    assert!(matches!(err, SemigroupError::StabilityViolation { .. }));
}

#[test]
fn omni_boundary_is_killed_and_velocity_noise_keeps_position_faces() {
    let omni = bench(BenchmarkId::DiOmni, &[11, 21]);
    let disc = Discretization::new(&omni).unwrap();
    let spec = omni.grid();
    for k in 0..spec.len() {
        assert_eq!(disc.is_killed(k), spec.on_box_boundary(k));
    }
    let vel = bench(BenchmarkId::DiVelocity, &[11, 21]);
    let disc = Discretization::new(&vel).unwrap();
    // x faces have no normal noise; v faces do
    assert!(!disc.is_killed(spec.flat_index(&[0, 10])));
    assert!(!disc.is_killed(spec.flat_index(&[10, 10])));
    assert!(disc.is_killed(spec.flat_index(&[5, 0])));
    assert!(disc.is_killed(spec.flat_index(&[5, 20])));
}

#[test]
fn optimal_policy_is_bang_bang_away_from_velocity_maxima() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| {
        ((1.0 - x[0] * x[0]) * (4.0 - x[1] * x[1])).max(0.0) * (1.0 + 0.3 * x[1])
    })
    .unwrap();
    let cfg = PropagationConfig::with_horizon(0.05);
    let (out, policy) = propagate_optimal(&beta, &sys, &cfg).unwrap();
    let disc = Discretization::new(&sys).unwrap();
    let spec = sys.grid();
    for k in 0..spec.len() {
        if !disc.is_live(k) {
            continue;
        }
        let u = policy.input(k)[0];
        if u == 0.0 {
            // upwinding holds still only at a local maximum along v
            let v = |j: Option<usize>| j.filter(|&j| disc.is_live(j)).map_or(0.0, |j| out.values()[j]);
            let here = out.values()[k];
            assert!(v(spec.shift(k, 1, 1)) <= here && v(spec.shift(k, 1, -1)) <= here, "node {k}");
        } else {
            assert!(u == -1.0 || u == 1.0, "node {k}: {u}");
        }
    }
}

#[test]
fn input_noise_argmax_matches_dense_search() {
    let sys = bench(BenchmarkId::DiInputNoise, &[21, 41]);
    // concave in v so interior maximizers appear
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| {
        (1.0 - x[0] * x[0]) * (4.0 - (x[1] - 0.3) * (x[1] - 0.3)).max(0.0)
    })
    .unwrap();
    let cfg = PropagationConfig::with_horizon(1e-3);
    let (out, policy) = propagate_optimal(&beta, &sys, &cfg).unwrap();
    let disc = Discretization::new(&sys).unwrap();
    let mut interior = 0;
    for k in 0..sys.grid().len() {
        let mi = {
            let mut m = vec![0; 2];
            sys.grid().multi_index(k, &mut m);
            m
        };
        if mi[0] == 0 || mi[0] == 20 || mi[1] == 0 || mi[1] == 40 {
            continue;
        }
        let g = |u: f64| disc.generator(&out, &[u], k).unwrap();
        let u_star = policy.input(k)[0];
        let best_dense = (0..=2000).map(|j| g(-1.0 + j as f64 / 1000.0)).fold(f64::NEG_INFINITY, f64::max);
        assert!(g(u_star) >= best_dense - 1e-9 * (1.0 + best_dense.abs()), "node {k}");
        if u_star.abs() < 1.0 {
            interior += 1;
        }
    }
    assert!(interior > 0);
}

#[test]
fn deterministic_double_integrator_stays_nonnegative() {
    let sys = bench(BenchmarkId::DiDeterministic, &[21, 41]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| (0.5 - x[0].abs()).max(0.0)).unwrap();
    let (out, _) = propagate_optimal(&beta, &sys, &PropagationConfig::with_horizon(0.5)).unwrap();
    assert!(out.min() >= 0.0);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let sys = bench(BenchmarkId::DiOmni, &[41, 81]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| (1.0 - x[0] * x[0]) * (4.0 - x[1] * x[1])).unwrap();
    let cfg = PropagationConfig::with_horizon(0.2);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| propagate_optimal(&beta, &sys, &cfg).unwrap())
    };
    let (a, pa) = run(1);
    let (b, pb) = run(3);
    assert_eq!(a.values(), b.values());
    assert_eq!(pa, pb);
}

#[test]
fn non_cached_candidates_give_the_same_field() {
    let sys = bench(BenchmarkId::DiInputNoise, &[21, 41]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| (1.0 - x[0] * x[0]) * (4.0 - x[1] * x[1])).unwrap();
    let cached = PropagationConfig::with_horizon(0.1);
    let uncached = PropagationConfig { cache_limit_bytes: 0, ..cached.clone() };
    let (a, pa) = propagate_optimal(&beta, &sys, &cached).unwrap();
    let (b, pb) = propagate_optimal(&beta, &sys, &uncached).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(pa, pb);
}

#[test]
fn policy_table_clamps_on_write() {
    let sys = bench(BenchmarkId::WigAircraft, &[5, 5, 5]);
    let mut p = PolicyTable::centered(&sys);
    p.set(3, &[1.0, -5.0]);
    assert_eq!(p.input(3), &[0.2, 0.0]);
    let u = p.interpolate(&sys.grid().node_point(3)).unwrap();
    assert_eq!(u, vec![0.2, 0.0]);
}

fn random_field(sys: &SystemModel, vals: &[f64]) -> ScalarField {
    let n = sys.grid().len();
    ScalarField::new(sys.grid().clone(), (0..n).map(|k| vals[k % vals.len()] * (1.0 + (k % 7) as f64 * 0.1)).collect())
        .unwrap()
}

fn random_policy(sys: &SystemModel, vals: &[f64]) -> PolicyTable {
    let mut p = PolicyTable::centered(sys);
    let (lo, hi) = (sys.input_lower().to_vec(), sys.input_upper().to_vec());
    for k in 0..sys.grid().len() {
        let u: Vec<f64> = (0..sys.n_u())
            .map(|i| lo[i] + (hi[i] - lo[i]) * vals[(k * 3 + i * 5) % vals.len()])
            .collect();
        p.set(k, &u);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagation_is_positive_linear_and_non_expansive(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        v1 in prop::collection::vec(0.0f64..1.0, 97),
        v2 in prop::collection::vec(0.0f64..1.0, 89),
        pv in prop::collection::vec(0.0f64..1.0, 53),
    ) {
        let sys = bench(BenchmarkId::DiVelocity, &[15, 25]);
        let cfg = PropagationConfig::with_horizon(0.1);
        let policy = random_policy(&sys, &pv);
        let b1 = random_field(&sys, &v1);
        let b2 = random_field(&sys, &v2);
        let t1 = propagate(&b1, &sys, &policy, &cfg).unwrap();
        let t2 = propagate(&b2, &sys, &policy, &cfg).unwrap();
        prop_assert!(t1.min() >= 0.0);
        prop_assert!(sup_norm(&t1) <= sup_norm(&b1));
        let combo = b1.axpby(a, &b2, b).unwrap();
        let t_combo = propagate(&combo, &sys, &policy, &cfg).unwrap();
        let expected = t1.axpby(a, &t2, b).unwrap();
        let scale = a.abs() * sup_norm(&b1) + b.abs() * sup_norm(&b2);
        prop_assert!(sup_distance(&t_combo, &expected).unwrap() <= 1e-10 * scale.max(1e-300));
    }

    #[test]
    fn optimal_propagation_dominates_fixed_policies(
        v in prop::collection::vec(0.0f64..1.0, 61),
        pv in prop::collection::vec(0.0f64..1.0, 41),
    ) {
        let sys = bench(BenchmarkId::DiOmni, &[15, 29]);
        let cfg = PropagationConfig::with_horizon(0.1);
        let beta = random_field(&sys, &v);
        let (best, _) = propagate_optimal(&beta, &sys, &cfg).unwrap();
        let fixed = propagate(&beta, &sys, &random_policy(&sys, &pv), &cfg).unwrap();
        for (o, f) in best.values().iter().zip(fixed.values()) {
            prop_assert!(*o >= *f - 1e-12);
        }
    }
}

#[test]
fn generator_consistency_for_a_short_step() {
    let sys = bench(BenchmarkId::DiOmni, &[41, 81]);
    let beta = ScalarField::from_fn(sys.grid().clone(), |x| {
        (PI * (x[0] + 1.0) / 2.0).sin() * (PI * (x[1] + 2.0) / 4.0).sin()
    })
    .unwrap();
    let policy = PolicyTable::constant(&sys, &[0.4]);
    let disc = Discretization::new(&sys).unwrap();
    for delta in [1e-4, 1e-5] {
        let out = disc.propagate(&beta, &policy, &PropagationConfig::with_horizon(delta)).unwrap();
        for k in 0..sys.grid().len() {
            if let Ok(g) = disc.generator(&beta, &[0.4], k) {
                let fd = (out.values()[k] - beta.values()[k]) / delta;
                assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "node {k}: {fd} vs {g}");
            }
        }
    }
}

#[test]
fn semigroup_defect_is_within_truncation_estimate() {
    let sys = bench(BenchmarkId::Brownian1d, &[201]);
    let beta = sine_mode(&sys);
    let policy = PolicyTable::centered(&sys);
    let (t, s) = (0.3, 0.2);
    let whole = propagate(&beta, &sys, &policy, &PropagationConfig::with_horizon(t + s)).unwrap();
    let first = propagate(&beta, &sys, &policy, &PropagationConfig::with_horizon(t)).unwrap();
    let split = propagate(&first, &sys, &policy, &PropagationConfig::with_horizon(s)).unwrap();
    let defect = sup_distance(&whole, &split).unwrap();
    let truncation = sup_distance(&whole, &beta.scaled((-PI * PI / 8.0 * (t + s)).exp())).unwrap();
    assert!(defect <= 5.0 * truncation, "defect {defect} truncation {truncation}");
}
