//! Benchmarks live in `benches/`; run them with `cargo bench -p bcva-bench`.
