//! Run configuration: a JSON file with every field optional, overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use nepqa_core::corpus::SplitRatios;
use nepqa_core::textkit::{parse_stopwords, parse_suffix_table};
use nepqa_core::{EncoderClassifierConfig, ModelKind, PipelineConfig, Seq2SeqConfig, TrainingSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Raw dataset read by `prepare`.
    pub dataset: Option<PathBuf>,
    /// Directory of prepared splits.
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub model_kind: ModelKind,
    pub pipeline: PipelineConfig,
    pub retrieval: EncoderClassifierConfig,
    pub generative: Seq2SeqConfig,
    /// Its `seed` is replaced by the top-level `seed`.
    pub training: TrainingSpec,
    pub split: SplitRatios,
    /// Seeds both the split and training.
    pub seed: u64,
    pub bleu_max_n: usize,
    pub rules: Option<PathBuf>,
    /// Plain-text stopword list, one token per line; replaces
    /// `pipeline.stopword_list`.
    pub stopwords: Option<PathBuf>,
    /// Suffix table (`<suffix>\t<min_remaining>` per line); replaces
    /// `pipeline.suffix_table`.
    pub suffix_table: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            data_dir: None,
            output_dir: None,
            model_kind: ModelKind::Retrieval,
            pipeline: PipelineConfig::default(),
            retrieval: EncoderClassifierConfig::default(),
            generative: Seq2SeqConfig::default(),
            training: TrainingSpec::default(),
            split: SplitRatios::default(),
            seed: 42,
            bleu_max_n: 2,
            rules: None,
            stopwords: None,
            suffix_table: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Reads `path` if given, otherwise the defaults, then applies `seed`.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.training.seed = cfg.seed;
        if let Some(p) = &cfg.stopwords {
            let text = read_text(p)?;
            cfg.pipeline.stopword_list = parse_stopwords(&text);
        }
        if let Some(p) = &cfg.suffix_table {
            let text = read_text(p)?;
            cfg.pipeline.suffix_table =
                parse_suffix_table(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        }
        cfg.pipeline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(1..=4).contains(&cfg.bleu_max_n) {
            return Err(CliError::Usage("bleu_max_n must be in 1..=4".into()));
        }
        Ok(cfg)
    }

    /// Generative config with `max_decode_len` capped at the pipeline bound.
    pub fn generative_config(&self) -> Seq2SeqConfig {
        let mut g = self.generative.clone();
        g.max_decode_len = g.max_decode_len.min(self.pipeline.max_len);
        g
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub(crate) fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Usage(format!("{what} not given (use the flag or the config file)")))
}
