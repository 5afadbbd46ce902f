//! Criterion benchmarks for the training and analysis hot paths; see `benches/`.
