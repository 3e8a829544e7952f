//! Benchmarks for the refinement kernels live under `benches/`.
