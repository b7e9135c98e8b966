//! Benchmarks for the obstacle solvers; see `benches/`.
