//! Criterion benchmarks for the text pipeline, attention, BLEU and
//! classification. Run with `cargo bench -p nepqa-bench`.
