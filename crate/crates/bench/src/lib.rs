//! Criterion benchmarks for the txloc pipeline; see `benches/`.
