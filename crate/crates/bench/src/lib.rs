//! Criterion benchmarks for `follmer-core`; see `benches/`.
