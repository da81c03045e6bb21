use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use doublepass_core::estimation::{init_prior_grid, particle_filter_step};
use doublepass_core::filters::{projection_step, sse_step};
use doublepass_core::spin::{build_collective_ops, coherent_state_x};
use doublepass_core::{CouplingParams, GaussianState, Spin};

fn sse(c: &mut Criterion) {
    let spin = Spin::new(100.0).unwrap();
    let ops = build_collective_ops(spin).unwrap();
    let p = CouplingParams::new(1.7, 1.7).unwrap().with_rate(2.0);
    let psi = coherent_state_x(spin);
    c.bench_function("sse_step F=100", |b| b.iter(|| sse_step(&psi, &ops, &p, 0.0, 0.01, 1e-4).unwrap()));
}

fn projection(c: &mut Criterion) {
    let spin = Spin::new(1000.0).unwrap();
    let p = CouplingParams::new(0.03, 0.03).unwrap().with_field(0.0);
    let g = GaussianState::coherent(spin);
    c.bench_function("projection_step", |b| b.iter(|| projection_step(&g, &p, 0.0, 0.01, 1e-4).unwrap()));
}

fn particles(c: &mut Criterion) {
    let spin = Spin::new(100.0).unwrap();
    let p = CouplingParams::new(0.17, 0.17).unwrap();
    let pe = init_prior_grid(1e3, 10_000, spin, &p).unwrap();
    c.bench_function("particle_filter_step Np=1e4", |b| {
        b.iter_batched_ref(|| pe.clone(), |pe| particle_filter_step(pe, 0.001, 1e-4).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group!(benches, sse, projection, particles);
criterion_main!(benches);
