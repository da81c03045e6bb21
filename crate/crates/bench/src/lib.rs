//! Criterion benchmarks for the filter kernels live in `benches/`.
