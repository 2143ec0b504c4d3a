//! Criterion benchmarks for the co-occurrence and network kernels; see `benches/`.
