//! Criterion benchmarks for the `hignn` crate; see `benches/`.
