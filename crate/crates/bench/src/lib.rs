//! Benchmarks for the convolution kernels, the two executors and the planner.
//! See `benches/kernels.rs`; run with `cargo bench -p streamsgd-bench`.
