//! Criterion benchmarks for the model, kNN and episode loop; see `benches/`.
