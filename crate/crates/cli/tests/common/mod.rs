#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nepqa_cli::config::RunConfig;
use nepqa_core::ModelKind;

pub fn toy_dataset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_faq.jsonl")
}

pub fn rules_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/rules.json")
}

/// Small models so a full train takes seconds.
pub fn tiny_config(kind: ModelKind, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model_kind: kind,
        ..Default::default()
    };
    cfg.pipeline.max_len = 32;
    cfg.retrieval.d_model = 16;
    cfg.retrieval.n_heads = 2;
    cfg.retrieval.n_layers = 1;
    cfg.retrieval.d_ff = 32;
    cfg.generative.d_model = 16;
    cfg.generative.n_heads = 2;
    cfg.generative.n_enc_layers = 1;
    cfg.generative.n_dec_layers = 1;
    cfg.generative.d_ff = 32;
    cfg.generative.max_decode_len = 16;
    cfg.training.learning_rate = 1e-3;
    cfg.training.batch_size = 8;
    cfg.training.epochs = epochs;
    cfg.training.seed = cfg.seed;
    cfg
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}
