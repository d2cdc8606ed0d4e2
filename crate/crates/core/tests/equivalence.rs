use nalgebra::{DMatrix, DVector};
use newtonflow::equivalence::{equivalence_experiment, ExperimentSpec};
use newtonflow::fields::builtin::{affine, linear_decay, rotation};
use newtonflow::particles::{Method, Smoothing};
use newtonflow::transport::SubstepPolicy;
use newtonflow::GridSpec;

fn spec_1d(n_particles: usize, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        field: linear_decay(1),
        init_mean: DVector::from_vec(vec![0.3]),
        init_cov: DMatrix::from_element(1, 1, 0.15 * 0.15),
        n_particles,
        grid: GridSpec::cell_centered(&[-1.0], &[1.0], &[0.02]).unwrap(),
        dt: 0.05,
        t_end: 0.5,
        snapshot_times: vec![0.0, 0.25, 0.5],
        seed,
        method: Method::Rk4,
        smoothing: Smoothing::Histogram,
        policy: SubstepPolicy::Subcycle { cfl: 0.9 },
    }
}

#[test]
fn experiment_is_deterministic_end_to_end() {
    let spec = ExperimentSpec {
        field: rotation(),
        init_mean: DVector::from_vec(vec![0.2, -0.1]),
        init_cov: DMatrix::from_diagonal_element(2, 2, 0.04),
        grid: GridSpec::cell_centered(&[-1.5, -1.5], &[1.5, 1.5], &[0.05, 0.05]).unwrap(),
        snapshot_times: vec![0.0, 0.5],
        ..spec_1d(5000, 11)
    };
    let a = equivalence_experiment(&spec).unwrap();
    let b = equivalence_experiment(&spec).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report, y.report);
        assert_eq!(x.pde, y.pde);
        assert_eq!(x.particles, y.particles);
        assert_eq!(x.escaped_fraction.to_bits(), y.escaped_fraction.to_bits());
    }
}

#[test]
fn l1_does_not_grow_with_particle_count() {
    let runs: Vec<_> = [1_000, 10_000, 100_000]
        .iter()
        .map(|&n| equivalence_experiment(&spec_1d(n, 3)).unwrap())
        .collect();
    for snap in 0..3 {
        let l1: Vec<f64> = runs.iter().map(|r| r[snap].report.l1_distance).collect();
        for w in l1.windows(2) {
            assert!(w[1] <= 1.1 * w[0], "snapshot {snap}: l1 {l1:?}");
        }
    }
}

#[test]
fn particle_escape_tracks_pde_outflow() {
    // Expansion pushes both descriptions through the boundary.
    let spec = ExperimentSpec {
        field: affine(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)),
        t_end: 1.0,
        snapshot_times: vec![1.0],
        ..spec_1d(20_000, 8)
    };
    let r = equivalence_experiment(&spec).unwrap();
    let last = &r[0];
    assert!(last.outflow_fraction > 0.1);
    assert!(last.escape_gap() < 0.03, "gap {}", last.escape_gap());
}
