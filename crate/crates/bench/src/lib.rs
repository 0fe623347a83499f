//! Benchmark-only crate; see `benches/kernels.rs` and `benches/pipeline.rs`.
//!
//! Run with `cargo bench -p cycden-bench` (optionally a filter such as
//! `cargo bench -p cycden-bench conv`).
