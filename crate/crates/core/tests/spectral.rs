use std::collections::BTreeMap;
use std::f64::consts::PI;

use scbf_core::grid::{sup_distance, sup_norm, ScalarField};
use scbf_core::semigroup::{Discretization, PolicyTable, PropagationConfig};
use scbf_core::spectral::{
    coarse_to_fine, default_init, eigen_residual, power_iteration, power_policy_iteration,
    power_policy_iteration_with, recompute_gamma, resample, PolicyUpdate, SpectralError,
};
use scbf_core::systems::{make_benchmark, BenchmarkId, SystemModel};

fn bench(id: BenchmarkId, counts: &[usize]) -> SystemModel {
    make_benchmark(id, &BTreeMap::new()).unwrap().with_resolution(counts).unwrap()
}

fn brownian_result(cfg: &PropagationConfig) -> (SystemModel, scbf_core::spectral::EigenResult) {
    let sys = bench(BenchmarkId::Brownian1d, &[201]);
    let init = default_init(sys.grid());
    let r = power_iteration(&sys, &PolicyTable::centered(&sys), cfg, &init, 1e-6, 500).unwrap();
    (sys, r)
}

#[test]
fn brownian_eigenpair_matches_the_dirichlet_laplacian() {
    let (sys, r) = brownian_result(&PropagationConfig::default());
    let exact = PI * PI / 8.0;
    assert!((r.gamma - exact).abs() < 0.02 * exact, "gamma {}", r.gamma);
    let sine = ScalarField::from_fn(sys.grid().clone(), |x| (PI * (x[0] + 1.0) / 2.0).sin()).unwrap();
    assert!(sup_distance(&r.psi, &sine).unwrap() < 0.02);
    assert!(r.converged);
}

#[test]
fn converged_init_finishes_in_one_iteration() {
    let cfg = PropagationConfig::default();
    let (sys, r) = brownian_result(&cfg);
    let again = power_iteration(&sys, &r.policy, &cfg, &r.psi, 1e-4, 50).unwrap();
    assert_eq!(again.iterations(), 1);
    assert!(again.final_residual() < 1e-4);
}

#[test]
fn eigen_relation_and_horizon_invariance_on_brownian() {
    let cfg = PropagationConfig::default();
    let (sys, r) = brownian_result(&cfg);
    assert!(eigen_residual(&r, &sys, &cfg).unwrap() < 1e-3);
    assert!((recompute_gamma(&r, &sys, &cfg).unwrap() - r.gamma).abs() < 1e-5);
    let doubled = PropagationConfig::with_horizon(2.0 * cfg.horizon);
    let g2 = recompute_gamma(&r, &sys, &doubled).unwrap();
    assert!((g2 - r.gamma).abs() < 0.02 * r.gamma);
}

#[test]
fn iterates_are_normalized_nonnegative_and_zero_on_killed_nodes() {
    let sys = bench(BenchmarkId::DiOmni, &[31, 61]);
    let cfg = PropagationConfig::default();
    let r = power_policy_iteration(&sys, &cfg, &default_init(sys.grid()), &PolicyTable::centered(&sys), 1e-4, 500)
        .unwrap();
    assert!((sup_norm(&r.psi) - 1.0).abs() <= 1e-12);
    assert!(r.psi.min() >= 0.0);
    let disc = Discretization::new(&sys).unwrap();
    for k in 0..sys.grid().len() {
        if disc.is_killed(k) {
            assert_eq!(r.psi.values()[k], 0.0);
        }
    }
    assert!(eigen_residual(&r, &sys, &cfg).unwrap() < 5e-3);
}

#[test]
fn worse_policy_decays_faster() {
    let sys = bench(BenchmarkId::DiOmni, &[31, 61]);
    let cfg = PropagationConfig::default();
    let init = default_init(sys.grid());
    let best = power_policy_iteration(&sys, &cfg, &init, &PolicyTable::centered(&sys), 1e-4, 500).unwrap();
    let zero = power_iteration(&sys, &PolicyTable::constant(&sys, &[0.0]), &cfg, &init, 1e-4, 500).unwrap();
    assert!(zero.gamma >= best.gamma, "zero {} best {}", zero.gamma, best.gamma);
    let backup = power_iteration(&sys, &best.policy, &cfg, &best.psi, 1e-4, 500).unwrap();
    assert!(zero.gamma >= backup.gamma);
}

#[test]
fn two_step_and_accelerated_updates_agree() {
    let sys = bench(BenchmarkId::DiOmni, &[31, 61]);
    let cfg = PropagationConfig::default();
    let init = default_init(sys.grid());
    let centered = PolicyTable::centered(&sys);
    let a = power_policy_iteration_with(&sys, &cfg, &init, &centered, 1e-5, 500, PolicyUpdate::Accelerated).unwrap();
    let b = power_policy_iteration_with(&sys, &cfg, &init, &centered, 1e-5, 500, PolicyUpdate::TwoStep).unwrap();
    assert!((a.gamma - b.gamma).abs() < 0.02 * a.gamma, "{} vs {}", a.gamma, b.gamma);
    assert!(sup_distance(&a.psi, &b.psi).unwrap() < 0.05);
}

#[test]
fn not_converged_carries_the_partial_result() {
    let sys = bench(BenchmarkId::DiOmni, &[21, 41]);
    let cfg = PropagationConfig::default();
    let err = power_policy_iteration(&sys, &cfg, &default_init(sys.grid()), &PolicyTable::centered(&sys), 1e-12, 2)
        .unwrap_err();
    let partial = err.partial().expect("partial result");
    assert!(!partial.converged);
    assert_eq!(partial.iterations(), 2);
    assert!(partial.gamma > 0.0);
}

#[test]
fn annihilated_field_reports_collapse() {
    let sys = bench(BenchmarkId::Brownian1d, &[11]);
    let cfg = PropagationConfig::with_horizon(800.0);
    let err = power_iteration(&sys, &PolicyTable::centered(&sys), &cfg, &default_init(sys.grid()), 1e-4, 5)
        .unwrap_err();
    assert_eq!(err, SpectralError::Collapse { iteration: 1 });
}

#[test]
fn invalid_initial_guesses_are_rejected() {
    let sys = bench(BenchmarkId::Brownian1d, &[21]);
    let cfg = PropagationConfig::default();
    let policy = PolicyTable::centered(&sys);
    let zero = ScalarField::zeros(sys.grid().clone());
    assert!(matches!(power_iteration(&sys, &policy, &cfg, &zero, 1e-4, 5), Err(SpectralError::InvalidInit(_))));
    let neg = ScalarField::constant(sys.grid().clone(), -1.0);
    assert!(matches!(power_iteration(&sys, &policy, &cfg, &neg, 1e-4, 5), Err(SpectralError::InvalidInit(_))));
    let one = ScalarField::constant(sys.grid().clone(), 1.0);
    assert_eq!(power_iteration(&sys, &policy, &cfg, &one, 0.0, 5), Err(SpectralError::InvalidTolerance));
}

/// Nodes of the stopping-distance kernel of the double integrator.
fn in_kernel(x: f64, v: f64) -> bool {
    v.abs() <= 2.0 && (v <= 0.0 || x <= 1.0 - 0.5 * v * v) && (v >= 0.0 || x >= -1.0 + 0.5 * v * v)
}

fn hausdorff_cells(a: &[(i64, i64)], b: &[(i64, i64)]) -> f64 {
    let directed = |p: &[(i64, i64)], q: &[(i64, i64)]| {
        p.iter()
            .map(|&(i, j)| {
                q.iter().map(|&(k, l)| (((i - k).pow(2) + (j - l).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

#[test]
fn deterministic_limit_recovers_the_viability_kernel() {
    let sys = bench(BenchmarkId::DiDeterministic, &[81, 161]);
    let cfg = PropagationConfig::default();
    let r = power_policy_iteration(&sys, &cfg, &default_init(sys.grid()), &PolicyTable::centered(&sys), 1e-4, 500)
        .unwrap();
    let spec = sys.grid();
    let mut level = Vec::new();
    let mut kernel = Vec::new();
    let mut m = [0usize; 2];
    for k in 0..spec.len() {
        spec.multi_index(k, &mut m);
        let p = (m[0] as i64, m[1] as i64);
        let x = spec.node_point(k);
        if r.psi.values()[k] >= 0.5 {
            level.push(p);
        }
        if in_kernel(x[0], x[1]) {
            kernel.push(p);
        }
    }
    let d = hausdorff_cells(&level, &kernel);
    assert!(d <= 2.0, "hausdorff {d} cells");
}

#[test]
fn synthesis_is_identical_across_thread_counts() {
    let sys = bench(BenchmarkId::DiInputNoise, &[21, 41]);
    let cfg = PropagationConfig::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            power_policy_iteration(&sys, &cfg, &default_init(sys.grid()), &PolicyTable::centered(&sys), 1e-4, 500)
                .unwrap()
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn coarse_to_fine_matches_a_cold_start() {
    let sys = bench(BenchmarkId::DiOmni, &[31, 61]);
    let cfg = PropagationConfig::default();
    let warm = coarse_to_fine(&sys, &cfg, 1e-5, 500, PolicyUpdate::Accelerated).unwrap();
    let cold = power_policy_iteration(&sys, &cfg, &default_init(sys.grid()), &PolicyTable::centered(&sys), 1e-5, 500)
        .unwrap();
    assert!((warm.gamma - cold.gamma).abs() < 1e-3);
    assert!(sup_distance(&warm.psi, &cold.psi).unwrap() < 1e-2);
}

#[test]
fn resampling_reproduces_multilinear_fields() {
    let sys = bench(BenchmarkId::DiOmni, &[11, 21]);
    let fine = bench(BenchmarkId::DiOmni, &[21, 41]);
    let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
    let coarse = ScalarField::from_fn(sys.grid().clone(), f).unwrap();
    let up = resample(&coarse, fine.grid()).unwrap();
    let exact = ScalarField::from_fn(fine.grid().clone(), f).unwrap();
    assert!(sup_distance(&up, &exact).unwrap() < 1e-12);
}
