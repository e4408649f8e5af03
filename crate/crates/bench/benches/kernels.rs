use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use revmet::dynamics::{expm_step, Propagator};
use revmet::hilbert::fock_state;
use revmet::metrology::ProtocolSpec;
use revmet_bench::{sample_pulse, system_for};

fn bench_expm_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("expm_step");
    for n in [1usize, 3, 5] {
        let system = system_for(n);
        let pulse = sample_pulse(40.0, 64);
        let h = system.hamiltonian(&pulse, 7).expect("hamiltonian");
        let state = fock_state(system.space(), 0, 0, 0).expect("state");
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| expm_step(&h, 0.02, &state).expect("step"))
        });
    }
    group.finish();
}

fn bench_propagator_apply(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagator_apply");
    for n in [1usize, 3, 5] {
        let system = system_for(n);
        let pulse = sample_pulse(40.0, 64);
        let h = system.hamiltonian(&pulse, 7).expect("hamiltonian");
        let prop = Propagator::new(&h).expect("propagator");
        let state = fock_state(system.space(), 0, 0, 0).expect("state");
        let v = state.amplitudes().clone();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| prop.apply(&v, 0.02))
        });
    }
    group.finish();
}

fn bench_propagate(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagate_256_steps");
    group.sample_size(10);
    for n in [1usize, 3] {
        let system = system_for(n);
        let pulse = sample_pulse(40.0, 256);
        let state = fock_state(system.space(), 0, 0, 0).expect("state");
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| system.propagate(&state, &pulse).expect("trajectory"))
        });
    }
    group.finish();
}

fn bench_protocol_point(c: &mut Criterion) {
    let mut group = c.benchmark_group("protocol_point");
    for n in [3usize, 7] {
        let space = revmet::hilbert::SpaceDescriptor::for_photon_number(n, 2).expect("space");
        let spec = ProtocolSpec::exact(space, n, n).expect("protocol");
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let state = spec.run(0.73);
                let (mean, _) = spec.photon_stats(&state);
                (mean, spec.fisher(0.73))
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_expm_step,
    bench_propagator_apply,
    bench_propagate,
    bench_protocol_point
);
criterion_main!(benches);
