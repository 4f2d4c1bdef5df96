//! Criterion benchmarks for the fusion encoder live in `benches/`.
