//! Criterion benchmarks for the pipeline live in `benches/pipeline.rs`.
