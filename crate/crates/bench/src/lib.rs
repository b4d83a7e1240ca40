//! Criterion benchmarks for fedrel live under `benches/`.
