//! Criterion benchmarks for the collision map and the Ulam eigen-solver live in `benches/`.
