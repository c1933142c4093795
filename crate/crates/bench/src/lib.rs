//! Criterion benchmarks for the RSE-Net kernels live in `benches/`.
