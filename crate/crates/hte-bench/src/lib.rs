//! No library code; see `benches/pipelines.rs`.
