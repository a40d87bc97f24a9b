//! The lifecycle commands. Each returns its artifact so callers and tests
//! can inspect it; printing is left to the binary.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nepqa_core::corpus::{
    self, content_hash, deduplicate, normalize_pairs, parse_csv, parse_dataset_with, split, CorpusStats,
    Dataset, DatasetSplit, QAPair, SplitRatios,
};
use nepqa_core::generative::train_seq2seq;
use nepqa_core::model::{epoch_log_csv, peek_kind, EpochLog};
use nepqa_core::nn::AdamState;
use nepqa_core::retrieval::train_classifier;
use nepqa_core::textkit::default_suffix_table;
use nepqa_core::{
    DialogueManager, EvalReport, GenerativeModel, ModelKind, PipelineConfig, RetrievalModel, Source,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const CHECKPOINT_FILE: &str = "model.smbk";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const RUN_FILE: &str = "run.json";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path.display(), e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path.display(), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Reads JSON-lines, or CSV when the extension is `.csv`.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let data = if is_csv {
        let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        parse_csv(f)?
    } else {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        corpus::parse_dataset(&text)?
    };
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Contents of `stats.json` written by [`prepare`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub source: String,
    pub seed: u64,
    /// Hash of the input as parsed.
    pub dataset_hash: String,
    /// Hash of the deduplicated, normalized pairs.
    pub prepared_hash: String,
    pub pipeline: PipelineConfig,
    pub ratios: SplitRatios,
    /// Category names by id, shared by the three split files.
    pub categories: Vec<String>,
    pub duplicates_removed: usize,
    pub counts: SplitCounts,
    pub stats: CorpusStats,
}

/// Deduplicate, normalize and split a dataset into `out_dir`.
///
/// The split files hold normalized but unstemmed text; stemming is a
/// pipeline setting applied at training and inference time.
pub fn prepare(input: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<PreparedManifest, CliError> {
    let data = read_dataset(input)?;
    let dataset_hash = content_hash(&data.pairs, &data.categories);
    let unique = deduplicate(&data.pairs, &cfg.pipeline);
    let duplicates_removed = data.pairs.len() - unique.len();
    let clean = normalize_pairs(&unique, &cfg.pipeline);
    let parts = split(&clean, cfg.split, cfg.seed)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join(TRAIN_FILE), corpus::to_jsonl(&parts.train, &data.categories))?;
    write_file(&out_dir.join(VAL_FILE), corpus::to_jsonl(&parts.validation, &data.categories))?;
    write_file(&out_dir.join(TEST_FILE), corpus::to_jsonl(&parts.test, &data.categories))?;
    let manifest = PreparedManifest {
        source: input.display().to_string(),
        seed: cfg.seed,
        dataset_hash,
        prepared_hash: content_hash(&clean, &data.categories),
        pipeline: cfg.pipeline.clone(),
        ratios: cfg.split,
        categories: data.categories.clone(),
        duplicates_removed,
        counts: SplitCounts {
            train: parts.train.len(),
            validation: parts.validation.len(),
            test: parts.test.len(),
        },
        stats: corpus::stats(&clean, &cfg.pipeline),
    };
    write_file(&out_dir.join(STATS_FILE), to_json(&manifest))?;
    Ok(manifest)
}

fn read_part(dir: &Path, file: &str, categories: &[String]) -> Result<Vec<QAPair>, CliError> {
    let path = dir.join(file);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let data = parse_dataset_with(&text, categories).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if data.categories.len() != categories.len() {
        return Err(CliError::Data(format!("{} names a category missing from {STATS_FILE}", path.display())));
    }
    Ok(data.pairs)
}

/// Reads a directory written by [`prepare`].
pub fn load_prepared(dir: &Path) -> Result<(DatasetSplit, PreparedManifest), CliError> {
    let path = dir.join(STATS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let manifest: PreparedManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let split = DatasetSplit {
        train: read_part(dir, TRAIN_FILE, &manifest.categories)?,
        validation: read_part(dir, VAL_FILE, &manifest.categories)?,
        test: read_part(dir, TEST_FILE, &manifest.categories)?,
        seed: manifest.seed,
    };
    if split.train.is_empty() {
        return Err(CliError::Data(format!("{} has no training pairs", dir.display())));
    }
    Ok((split, manifest))
}

/// CSV → canonical JSON-lines. Returns the number of records written.
pub fn convert(input: &Path, output: &Path) -> Result<usize, CliError> {
    let f = std::fs::File::open(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let data = parse_csv(f)?;
    write_file(output, corpus::to_jsonl(&data.pairs, &data.categories))?;
    Ok(data.pairs.len())
}

/// A trained model of either kind.
pub enum AnyModel {
    Retrieval(RetrievalModel),
    Generative(GenerativeModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Retrieval(_) => ModelKind::Retrieval,
            AnyModel::Generative(_) => ModelKind::Generative,
        }
    }

    pub fn load(path: &Path) -> Result<AnyModel, CliError> {
        Ok(match peek_kind(path)? {
            ModelKind::Retrieval => AnyModel::Retrieval(RetrievalModel::load(path)?),
            ModelKind::Generative => AnyModel::Generative(GenerativeModel::load(path)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        match self {
            AnyModel::Retrieval(m) => m.save(path)?,
            AnyModel::Generative(m) => m.save(path)?,
        }
        Ok(())
    }

    pub fn evaluate(&self, pairs: &[QAPair], bleu_max_n: usize) -> Result<EvalReport, CliError> {
        Ok(match self {
            AnyModel::Retrieval(m) => m.evaluate(pairs)?,
            AnyModel::Generative(m) => m.evaluate(pairs, bleu_max_n)?,
        })
    }

    pub fn best_epoch(&self) -> usize {
        match self {
            AnyModel::Retrieval(m) => m.best_epoch(),
            AnyModel::Generative(m) => m.best_epoch(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            AnyModel::Retrieval(m) => m.vocab().len(),
            AnyModel::Generative(m) => m.vocab().len(),
        }
    }
}

/// Trains one backend on prepared splits. Nothing is written.
pub fn fit(
    split: &DatasetSplit,
    manifest: &PreparedManifest,
    kind: ModelKind,
    cfg: &RunConfig,
) -> Result<(AnyModel, Vec<EpochLog>), CliError> {
    Ok(match kind {
        ModelKind::Retrieval => {
            let mut t = train_classifier(split, &cfg.retrieval, &cfg.training, &cfg.pipeline)?;
            t.model.set_category_names(manifest.categories.clone());
            (AnyModel::Retrieval(t.model), t.log)
        }
        ModelKind::Generative => {
            let t = train_seq2seq(split, &cfg.generative_config(), &cfg.training, &cfg.pipeline)?;
            (AnyModel::Generative(t.model), t.log)
        }
    })
}

/// Contents of `run.json` written by [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub dataset_hash: String,
    pub prepared_hash: String,
    pub config: RunConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Which split `final_report` was computed on.
    pub evaluated_on: String,
    pub final_report: EvalReport,
    pub checkpoint: PathBuf,
}

/// Trains the configured backend and writes the checkpoint, epoch log and
/// run summary into `out_dir`.
pub fn train(data_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let (split, manifest) = load_prepared(data_dir)?;
    let (model, log) = fit(&split, &manifest, cfg.model_kind, cfg)?;
    create_dir(out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    write_file(&out_dir.join(EPOCH_LOG_FILE), epoch_log_csv(&log))?;
    let (evaluated_on, pairs) = if split.validation.is_empty() {
        ("train", &split.train)
    } else {
        ("validation", &split.validation)
    };
    let summary = TrainSummary {
        model_kind: model.kind(),
        seed: cfg.seed,
        dataset_hash: manifest.dataset_hash.clone(),
        prepared_hash: manifest.prepared_hash.clone(),
        config: cfg.clone(),
        epochs_run: log.len(),
        best_epoch: model.best_epoch(),
        evaluated_on: evaluated_on.to_owned(),
        final_report: model.evaluate(pairs, cfg.bleu_max_n)?,
        checkpoint,
    };
    write_file(&out_dir.join(RUN_FILE), to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    fn select(self, split: &DatasetSplit) -> &[QAPair] {
        match self {
            Part::Train => &split.train,
            Part::Val => &split.validation,
            Part::Test => &split.test,
        }
    }
}

/// Output of [`evaluate`]: the report plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub model_kind: ModelKind,
    pub part: Part,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub dataset_hash: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn evaluate(checkpoint: &Path, data_dir: &Path, part: Part, bleu_max_n: usize) -> Result<EvalArtifact, CliError> {
    let model = AnyModel::load(checkpoint)?;
    let (split, manifest) = load_prepared(data_dir)?;
    let pairs = part.select(&split);
    if pairs.is_empty() {
        return Err(CliError::Data(format!("the {part:?} split is empty")));
    }
    let seed = match &model {
        AnyModel::Retrieval(m) => m.provenance().seed,
        AnyModel::Generative(m) => m.provenance().seed,
    };
    Ok(EvalArtifact {
        model_kind: model.kind(),
        part,
        checkpoint: checkpoint.to_path_buf(),
        seed,
        dataset_hash: manifest.dataset_hash,
        report: model.evaluate(pairs, bleu_max_n)?,
    })
}

/// One (model kind, stemming) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub model_kind: ModelKind,
    pub stemming: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub cell: Cell,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationHeader {
    pub seed: u64,
    pub dataset_hash: String,
    pub evaluated_on: String,
    pub training: nepqa_core::TrainingSpec,
    /// Choices this implementation makes where the method leaves room.
    pub stand_ins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub header: AblationHeader,
    pub rows: Vec<AblationRow>,
}

fn stand_ins(cfg: &RunConfig) -> Vec<String> {
    let adam = AdamState::new(cfg.training.learning_rate);
    vec![
        format!(
            "optimizer: Adam (beta1 {}, beta2 {}, epsilon {}), global gradient-norm clip {}",
            adam.beta1,
            adam.beta2,
            adam.epsilon,
            nepqa_core::model::GRAD_CLIP_NORM
        ),
        "decoding: greedy argmax until END or max_decode_len".to_owned(),
        format!(
            "stemmer: longest-suffix match over a {}-entry suffix table, one suffix per token",
            default_suffix_table().len()
        ),
        "encoders: small pre-LN transformers trained from scratch, no pretrained weights".to_owned(),
        "classifier: mean pooling over non-pad positions, canonical answer = first training answer of the category"
            .to_owned(),
        "generative: shared question/answer vocabulary with tied source/target embeddings".to_owned(),
        "bleu: corpus-level, one reference per candidate, no smoothing".to_owned(),
        "model selection: best validation accuracy, earliest epoch on ties".to_owned(),
    ]
}

/// Trains and evaluates every cell, in parallel, on the same prepared
/// splits and seed. A failing cell becomes a `FAILED` row.
pub fn ablate(data_dir: &Path, out_dir: &Path, cfg: &RunConfig, cells: &[Cell]) -> Result<AblationReport, CliError> {
    if cells.is_empty() {
        return Err(CliError::Usage("ablation grid is empty".into()));
    }
    for (i, c) in cells.iter().enumerate() {
        if cells[..i].contains(c) {
            return Err(CliError::Usage(format!("duplicate ablation cell {c:?}")));
        }
    }
    let (split, manifest) = load_prepared(data_dir)?;
    let (evaluated_on, eval_pairs) = if split.test.is_empty() {
        ("validation", &split.validation)
    } else {
        ("test", &split.test)
    };
    if eval_pairs.is_empty() {
        return Err(CliError::Data("no test or validation pairs to evaluate on".into()));
    }
    create_dir(out_dir)?;
    let run_cell = |cell: Cell| -> Result<AblationRow, CliError> {
        let mut cell_cfg = cfg.clone();
        cell_cfg.model_kind = cell.model_kind;
        cell_cfg.pipeline.apply_stemming = cell.stemming;
        let (model, log) = fit(&split, &manifest, cell.model_kind, &cell_cfg)?;
        let dir = out_dir.join(format!(
            "{}-{}",
            cell.model_kind,
            if cell.stemming { "stemmed" } else { "raw" }
        ));
        create_dir(&dir)?;
        model.save(&dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(EPOCH_LOG_FILE), epoch_log_csv(&log))?;
        Ok(AblationRow {
            cell,
            status: "ok".to_owned(),
            error: None,
            report: Some(model.evaluate(eval_pairs, cfg.bleu_max_n)?),
            vocab_size: Some(model.vocab_size()),
            best_epoch: Some(model.best_epoch()),
        })
    };
    let rows: Vec<AblationRow> = std::thread::scope(|s| {
        let handles: Vec<_> = cells.iter().map(|&c| (c, s.spawn(move || run_cell(c)))).collect();
        handles
            .into_iter()
            .map(|(cell, h)| {
                let outcome = h
                    .join()
                    .unwrap_or_else(|_| Err(CliError::Runtime("cell panicked".into())));
                outcome.unwrap_or_else(|e| AblationRow {
                    cell,
                    status: "FAILED".to_owned(),
                    error: Some(e.to_string()),
                    report: None,
                    vocab_size: None,
                    best_epoch: None,
                })
            })
            .collect()
    });
    let report = AblationReport {
        header: AblationHeader {
            seed: cfg.seed,
            dataset_hash: manifest.dataset_hash.clone(),
            evaluated_on: evaluated_on.to_owned(),
            training: cfg.training.clone(),
            stand_ins: stand_ins(cfg),
        },
        rows,
    };
    write_file(&out_dir.join("ablation.json"), to_json(&report))?;
    write_file(&out_dir.join("ablation.txt"), render_ablation(&report))?;
    Ok(report)
}

/// Fixed-width text table with the header notes above it.
pub fn render_ablation(r: &AblationReport) -> String {
    let mut out = String::new();
    let h = &r.header;
    let _ = writeln!(out, "# seed {}  dataset {}  evaluated on {}", h.seed, h.dataset_hash, h.evaluated_on);
    for s in &h.stand_ins {
        let _ = writeln!(out, "# {s}");
    }
    let _ = writeln!(
        out,
        "{:<11} {:<9} {:<7} {:>9} {:>9} {:>9} {:>8} {:>8} {:>9} {:>6}",
        "model", "stemming", "status", "accuracy", "micro_f1", "macro_f1", "bleu_1", "bleu_2", "token_acc", "vocab"
    );
    let f = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.4}"));
    for row in &r.rows {
        let rep = row.report.as_ref();
        let _ = writeln!(
            out,
            "{:<11} {:<9} {:<7} {:>9} {:>9} {:>9} {:>8} {:>8} {:>9} {:>6}",
            row.cell.model_kind.as_str(),
            if row.cell.stemming { "on" } else { "off" },
            row.status,
            f(rep.and_then(|x| x.accuracy)),
            f(rep.and_then(|x| x.micro_f1)),
            f(rep.and_then(|x| x.macro_f1)),
            f(rep.and_then(|x| x.bleu_at(1))),
            f(rep.and_then(|x| x.bleu_at(2))),
            f(rep.and_then(|x| x.per_token_accuracy)),
            row.vocab_size.map_or("-".to_owned(), |v| v.to_string()),
        );
        if let Some(e) = &row.error {
            let _ = writeln!(out, "    error: {e}");
        }
    }
    out
}

/// Reads lines until EOF or `/quit`, writing `[source] reply` for each.
pub fn chat_loop(dm: &DialogueManager, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    const SESSION: &str = "terminal";
    write!(output, "> ")?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if !text.is_empty() {
            let turn = dm.handle(SESSION, text);
            let tag = match turn.source {
                Source::Rule => "rule",
                Source::Retrieval => "retrieval",
                Source::Generative => "generative",
            };
            match turn.confidence {
                Some(c) => writeln!(output, "[{tag} {c:.2}] {}", turn.reply)?,
                None => writeln!(output, "[{tag}] {}", turn.reply)?,
            }
        }
        write!(output, "> ")?;
        output.flush()?;
    }
    Ok(())
}
