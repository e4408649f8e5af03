//! Cross-module invariants, property-style.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use proptest::prelude::*;

use revmet::dynamics::{read_pulse, write_pulse, ControlSystem, DriftSpec, Propagator, PulseSet};
use revmet::hilbert::{
    embed, fock_state, hermiticity_deviation, vec_norm, OperatorMatrix, PureState,
    SpaceDescriptor, Subsystem, TLS_DIM,
};

fn complex_matrix(d: usize) -> impl Strategy<Value = Array2<C64>> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), d * d).prop_map(move |entries| {
        Array2::from_shape_vec(
            (d, d),
            entries.into_iter().map(|(re, im)| C64::new(re, im)).collect(),
        )
        .expect("shape")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_index_round_trips(c1 in 2usize..6, c2 in 2usize..6) {
        let space = SpaceDescriptor::new(c1, c2).unwrap();
        let mut seen = vec![false; space.dim()];
        for s in 0..TLS_DIM {
            for n1 in 0..c1 {
                for n2 in 0..c2 {
                    let idx = space.index_of(s, n1, n2).unwrap();
                    prop_assert!(!seen[idx]);
                    seen[idx] = true;
                    prop_assert_eq!(space.labels(idx), (s, n1, n2));
                }
            }
        }
        prop_assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn embedding_is_a_homomorphism(a in complex_matrix(3), b in complex_matrix(3)) {
        let space = SpaceDescriptor::new(3, 2).unwrap();
        let ab = a.dot(&b);
        let embedded_product = embed(&ab, Subsystem::Mode1, space).unwrap();
        let product_of_embedded = embed(&a, Subsystem::Mode1, space)
            .unwrap()
            .matmul(&embed(&b, Subsystem::Mode1, space).unwrap())
            .unwrap();
        let dev = (embedded_product.entries() - product_of_embedded.entries())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        prop_assert!(dev < 1e-12, "deviation {}", dev);
    }

    #[test]
    fn pulse_files_round_trip_bitwise(
        t_final in 0.5f64..100.0,
        samples in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..40),
    ) {
        let n = samples.len();
        let channels: [Vec<f64>; 4] = [
            samples.iter().map(|s| s.0).collect(),
            samples.iter().map(|s| s.1).collect(),
            samples.iter().map(|s| s.2).collect(),
            samples.iter().map(|s| s.3).collect(),
        ];
        let pulse = PulseSet::new(t_final, n, channels).unwrap();
        let mut buf = Vec::new();
        write_pulse(&mut buf, &pulse).unwrap();
        let parsed = read_pulse(std::io::Cursor::new(&buf)).unwrap();
        prop_assert_eq!(parsed, pulse);
    }

    #[test]
    fn near_unitary_operators_preserve_norm(
        h in complex_matrix(8),
        amplitudes in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8),
    ) {
        // any Hermitian part exponentiates to a unitary; applying it to a
        // unit vector must keep the norm within 1e-10
        let space = SpaceDescriptor::new(2, 2).unwrap();
        let hermitian = (&h + &revmet::hilbert::dagger(&h)).mapv(|z| z / 2.0);
        let op = OperatorMatrix::hermitian(space, hermitian).unwrap();
        let prop_op = Propagator::new(&op).unwrap();
        let u = OperatorMatrix::general(space, prop_op.matrix(0.7)).unwrap();
        prop_assume!(u.unitarity_deviation() < 1e-12);

        let raw: Array1<C64> = amplitudes.iter().map(|&(re, im)| C64::new(re, im)).collect();
        prop_assume!(vec_norm(&raw) > 1e-3);
        let state = PureState::normalized(space, raw).unwrap();
        let out = u.apply_vec(state.amplitudes());
        prop_assert!((vec_norm(&out) - 1.0).abs() < 1e-10);
    }
}

#[test]
fn guard_level_monitor_sees_leakage_when_cutoff_is_tight() {
    // drive the TLS hard and couple strongly: with only one guard level the
    // top Fock state picks up measurable population, and the monitor must
    // report it
    let space = SpaceDescriptor::new(3, 3).unwrap();
    let system = ControlSystem::new(space, DriftSpec::default()).unwrap();
    let n = 200;
    let channels: [Vec<f64>; 4] = [
        vec![0.8; n],
        vec![0.0; n],
        vec![0.9; n],
        vec![0.7; n],
    ];
    let pulse = PulseSet::new(20.0, n, channels).unwrap();
    let vac = fock_state(space, 0, 0, 0).unwrap();
    let traj = system.propagate(&vac, &pulse).unwrap();
    assert!(traj.leak_max > 1e-6, "leak {}", traj.leak_max);
    assert!(!traj.truncation_ok());
}

#[test]
fn generators_and_drift_are_purely_real_matrices() {
    // the real-symmetric eigensolver fast path relies on this
    let space = SpaceDescriptor::new(4, 4).unwrap();
    let system = ControlSystem::new(space, DriftSpec::default()).unwrap();
    for g in system.generators() {
        assert!(g.entries().iter().all(|z| z.im == 0.0));
        assert!(hermiticity_deviation(g.entries()) < 1e-15);
    }
    let drift = DriftSpec::default().matrix(space).unwrap();
    assert!(drift.entries().iter().all(|z| z.im == 0.0));
}
