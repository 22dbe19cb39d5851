//! Criterion benchmarks for the scoring, feature and training hot paths; see `benches/`.
