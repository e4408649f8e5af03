//! Shared fixtures for the kernel benchmarks.

use revmet::dynamics::{ControlSystem, DriftSpec, PulseSet};
use revmet::hilbert::SpaceDescriptor;

/// A control system sized for an N-photon protocol with default drift.
pub fn system_for(n: usize) -> ControlSystem {
    let space = SpaceDescriptor::for_photon_number(n, 2).expect("valid cutoff");
    ControlSystem::new(space, DriftSpec::default()).expect("valid system")
}

/// A smooth nontrivial pulse on the given grid.
pub fn sample_pulse(t_final: f64, n_steps: usize) -> PulseSet {
    let channels: [Vec<f64>; 4] = [
        (0..n_steps).map(|k| 0.4 * (k as f64 * 0.013).sin()).collect(),
        (0..n_steps).map(|k| 0.1 * (k as f64 * 0.007).cos()).collect(),
        (0..n_steps).map(|k| 0.3 * (k as f64 * 0.011).sin()).collect(),
        (0..n_steps).map(|k| 0.25 * (k as f64 * 0.009).cos()).collect(),
    ];
    PulseSet::new(t_final, n_steps, channels).expect("valid pulse")
}
