//! Retrieval backend: a transformer-encoder classifier that maps a question
//! to a category and answers with that category's canonical answer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, QAPair};
use crate::dialogue::build_scope_vocab;
use crate::metrics::EvalReport;
use crate::model::{
    argmax, expect_kind, rng_stream, softmax_row, train_loop, BatchResult, ModelError, ModelKind,
    Provenance, Trained, TrainingSpec, INIT_STREAM,
};
use crate::nn::layers::{embed, init_layer_norm, init_linear, layer_norm, linear};
use crate::nn::{
    positional_encoding, AttentionConfig, BlockDims, Container, EncoderLayer, ForwardMode, Graph,
    Mask, NnError, ParamStore, Tensor, Var,
};
use crate::textkit::{encode, preprocess, PipelineConfig, Vocabulary, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderClassifierConfig {
    /// Set from the training vocabulary.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Set from the pipeline configuration.
    pub max_len: usize,
    /// Set from the training categories.
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderClassifierConfig {
    fn default() -> Self {
        EncoderClassifierConfig {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 250,
            n_classes: 0,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderClassifierConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        AttentionConfig::new(self.d_model, self.n_heads)?;
        if !self.d_model.is_multiple_of(2) {
            return Err(NnError::OddDModel(self.d_model).into());
        }
        if self.n_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.vocab_size <= crate::textkit::SPECIAL_TOKENS.len() || self.max_len == 0 {
            return Err(ModelError::InvalidConfig("vocab_size and max_len must be positive".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig("n_layers and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn dims(&self) -> BlockDims {
        BlockDims {
            attention: AttentionConfig {
                d_model: self.d_model,
                n_heads: self.n_heads,
            },
            d_ff: self.d_ff,
        }
    }
}

/// Category id → canonical answer, taken from the first training pair of
/// each category. Its key order doubles as the classifier's label order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryAnswerIndex(BTreeMap<usize, String>);

impl CategoryAnswerIndex {
    pub fn from_train(train: &[QAPair]) -> CategoryAnswerIndex {
        let mut map = BTreeMap::new();
        for p in train {
            map.entry(p.category_id).or_insert_with(|| p.answer.clone());
        }
        CategoryAnswerIndex(map)
    }

    pub fn get(&self, category_id: usize) -> Option<&str> {
        self.0.get(&category_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn category_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.keys().copied()
    }

    fn label_of(&self, category_id: usize) -> Option<usize> {
        self.0.keys().position(|&c| c == category_id)
    }

    fn category_of(&self, label: usize) -> (usize, &str) {
        let (c, a) = self.0.iter().nth(label).expect("label within head size");
        (*c, a.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_kind: String,
    config: EncoderClassifierConfig,
    pipeline: PipelineConfig,
    training: TrainingSpec,
    vocab: Vocabulary,
    scope_vocab: Vocabulary,
    answers: CategoryAnswerIndex,
    #[serde(default)]
    category_names: Vec<String>,
    best_epoch: usize,
    provenance: Provenance,
}

/// A trained classifier. Immutable and safe to share across threads.
#[derive(Debug, Clone)]
pub struct RetrievalModel {
    header: Header,
    params: ParamStore,
    positions: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub category_id: usize,
    pub confidence: f64,
    pub answer: String,
}

fn logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderClassifierConfig,
    positions: &Tensor,
    ids: &[usize],
    mode: &mut ForwardMode,
) -> Result<Var, NnError> {
    let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
    let rows: Vec<usize> = (0..ids.len()).filter(|&i| valid[i]).collect();
    let mask = (rows.len() < ids.len()).then(|| Rc::new(Mask::keys(ids.len(), &valid)));
    let mut x = embed(g, store, "embed", ids, positions)?;
    x = mode.dropout(g, x)?;
    for l in 0..cfg.n_layers {
        x = EncoderLayer::new(format!("enc.{l}"), cfg.dims()).forward(g, store, x, mask.clone(), mode)?;
    }
    let x = layer_norm(g, store, "enc.norm", x)?;
    let pooled = g.mean_rows(x, &rows)?;
    linear(g, store, "head", pooled)
}

fn init_params(cfg: &EncoderClassifierConfig, seed: u64) -> ParamStore {
    let mut rng = rng_stream(seed, INIT_STREAM);
    let mut store = ParamStore::new();
    store.xavier("embed", cfg.vocab_size, cfg.d_model, &mut rng);
    for l in 0..cfg.n_layers {
        EncoderLayer::new(format!("enc.{l}"), cfg.dims()).init(&mut store, &mut rng);
    }
    init_layer_norm(&mut store, "enc.norm", cfg.d_model);
    init_linear(&mut store, "head", cfg.d_model, cfg.n_classes, &mut rng);
    store
}

/// Question ids without padding; empty when nothing survives preprocessing.
fn question_ids(question: &str, vocab: &Vocabulary, pipeline: &PipelineConfig) -> Vec<usize> {
    let tokens = preprocess(question, pipeline);
    let mut ids = encode(&tokens, vocab, pipeline, false);
    ids.truncate(tokens.len().min(pipeline.max_len));
    ids
}

struct Example {
    ids: Vec<usize>,
    label: usize,
}

fn score_examples(
    store: &ParamStore,
    cfg: &EncoderClassifierConfig,
    positions: &Tensor,
    examples: &[Example],
) -> Result<Option<(f64, f64)>, ModelError> {
    if examples.is_empty() {
        return Ok(None);
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for ex in examples {
        let mut g = Graph::new();
        let z = logits(&mut g, store, cfg, positions, &ex.ids, &mut ForwardMode::Eval)?;
        let row = g.value(z).row(0);
        let p = softmax_row(row);
        loss -= p[ex.label].ln();
        correct += usize::from(argmax(row) == ex.label);
    }
    let n = examples.len() as f64;
    Ok(Some((loss / n, correct as f64 / n)))
}

/// Trains the classifier on `split.train`, selecting weights by validation
/// accuracy.
///
/// `vocab_size`, `max_len` and `n_classes` in `cfg` are overwritten from the
/// data and pipeline. Training pairs whose question is empty after
/// preprocessing are skipped.
pub fn train_classifier(
    split: &DatasetSplit,
    cfg: &EncoderClassifierConfig,
    spec: &TrainingSpec,
    pipeline: &PipelineConfig,
) -> Result<Trained<RetrievalModel>, ModelError> {
    pipeline.validate()?;
    spec.validate()?;
    let train_cats: BTreeSet<usize> = split.train.iter().map(|p| p.category_id).collect();
    if let Some(p) = split
        .validation
        .iter()
        .chain(&split.test)
        .find(|p| !train_cats.contains(&p.category_id))
    {
        return Err(ModelError::UnseenCategoryInEval(p.category_id));
    }
    let train_tokens: Vec<_> = split.train.iter().map(|p| preprocess(&p.question_raw, pipeline)).collect();
    let vocab = Vocabulary::build(&train_tokens, spec.vocab_min_frequency)?;
    let scope_vocab = build_scope_vocab(&split.train, pipeline)?;
    let answers = CategoryAnswerIndex::from_train(&split.train);

    let mut cfg = cfg.clone();
    cfg.vocab_size = vocab.len();
    cfg.max_len = pipeline.max_len;
    cfg.n_classes = answers.len();
    cfg.validate()?;
    let positions = positional_encoding(cfg.max_len, cfg.d_model)?;

    let to_examples = |pairs: &[QAPair]| -> Vec<Example> {
        pairs
            .iter()
            .filter_map(|p| {
                let ids = question_ids(&p.question_raw, &vocab, pipeline);
                let label = answers.label_of(p.category_id)?;
                (!ids.is_empty()).then_some(Example { ids, label })
            })
            .collect()
    };
    let train = to_examples(&split.train);
    let val = to_examples(&split.validation);

    let outcome = train_loop(
        &train,
        init_params(&cfg, spec.seed),
        spec,
        cfg.dropout_rate,
        |g, store, batch, mode| {
            let mut rows = Vec::with_capacity(batch.len());
            for ex in batch {
                rows.push(logits(g, store, &cfg, &positions, &ex.ids, mode)?);
            }
            let z = g.concat_rows(&rows)?;
            let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let correct = targets
                .iter()
                .enumerate()
                .filter(|(i, &t)| argmax(g.value(z).row(*i)) == t)
                .count();
            let loss = g.cross_entropy(z, &targets, None)?;
            Ok(BatchResult {
                loss,
                correct,
                counted: batch.len(),
            })
        },
        |store| score_examples(store, &cfg, &positions, &val),
    )?;

    let provenance = Provenance::new(split, spec.seed, vocab.content_hash());
    let header = Header {
        model_kind: ModelKind::Retrieval.as_str().to_owned(),
        config: cfg,
        pipeline: pipeline.clone(),
        training: spec.clone(),
        vocab,
        scope_vocab,
        answers,
        category_names: Vec::new(),
        best_epoch: outcome.best_epoch,
        provenance,
    };
    Ok(Trained {
        model: RetrievalModel {
            header,
            params: outcome.params,
            positions,
        },
        log: outcome.log,
    })
}

impl RetrievalModel {
    pub fn config(&self) -> &EncoderClassifierConfig {
        &self.header.config
    }

    pub fn pipeline(&self) -> &PipelineConfig {
        &self.header.pipeline
    }

    pub fn training(&self) -> &TrainingSpec {
        &self.header.training
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.header.vocab
    }

    /// Vocabulary of the training questions used for scope checks.
    pub fn scope_vocab(&self) -> &Vocabulary {
        &self.header.scope_vocab
    }

    pub fn answers(&self) -> &CategoryAnswerIndex {
        &self.header.answers
    }

    pub fn provenance(&self) -> &Provenance {
        &self.header.provenance
    }

    pub fn best_epoch(&self) -> usize {
        self.header.best_epoch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn category_names(&self) -> &[String] {
        &self.header.category_names
    }

    /// Attaches human-readable category names (index = category id).
    pub fn set_category_names(&mut self, names: Vec<String>) {
        self.header.category_names = names;
    }

    /// Softmax over the classifier head, in label order (see
    /// [`CategoryAnswerIndex::category_ids`]).
    pub fn probabilities(&self, question: &str) -> Result<Vec<f64>, ModelError> {
        let ids = question_ids(question, self.vocab(), self.pipeline());
        if ids.is_empty() {
            return Err(ModelError::EmptyAfterPreprocessing);
        }
        let mut g = Graph::new();
        let z = logits(&mut g, &self.params, self.config(), &self.positions, &ids, &mut ForwardMode::Eval)?;
        Ok(softmax_row(g.value(z).row(0)))
    }

    pub fn classify(&self, question: &str) -> Result<Classification, ModelError> {
        let p = self.probabilities(question)?;
        let label = argmax(&p);
        let (category_id, answer) = self.header.answers.category_of(label);
        Ok(Classification {
            category_id,
            confidence: p[label],
            answer: answer.to_owned(),
        })
    }

    /// Accuracy, micro/macro F1 and per-class counts over `pairs`. A pair
    /// whose question is empty after preprocessing counts as a miss.
    pub fn evaluate(&self, pairs: &[QAPair]) -> Result<EvalReport, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyEvalSet);
        }
        let miss = self.header.answers.category_ids().max().unwrap_or(0) + 1;
        let mut gold = Vec::with_capacity(pairs.len());
        let mut pred = Vec::with_capacity(pairs.len());
        for p in pairs {
            gold.push(p.category_id);
            pred.push(match self.classify(&p.question_raw) {
                Ok(c) => c.category_id,
                Err(ModelError::EmptyAfterPreprocessing) => miss,
                Err(e) => return Err(e),
            });
        }
        Ok(EvalReport::classification(&gold, &pred)?)
    }

    pub fn to_container(&self) -> Result<Container, ModelError> {
        Ok(Container {
            header: serde_json::to_string(&self.header)?,
            tensors: self.params.clone(),
        })
    }

    pub fn from_container(c: Container) -> Result<RetrievalModel, ModelError> {
        expect_kind(&c.header, ModelKind::Retrieval)?;
        let header: Header = serde_json::from_str(&c.header)?;
        header.config.validate()?;
        let positions = positional_encoding(header.config.max_len, header.config.d_model)?;
        let model = RetrievalModel {
            header,
            params: c.tensors,
            positions,
        };
        let reference = init_params(model.config(), 0);
        for (name, t) in reference.iter() {
            if model.params.get(name).map(Tensor::shape) != Some(t.shape()) {
                return Err(ModelError::InvalidConfig(format!("checkpoint tensor {name} missing or misshapen")));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(self.to_container()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RetrievalModel, ModelError> {
        Self::from_container(Container::load(path)?)
    }
}

/// Free-function form of [`RetrievalModel::classify`].
pub fn classify(question: &str, model: &RetrievalModel) -> Result<Classification, ModelError> {
    model.classify(question)
}

/// Free-function form of [`RetrievalModel::evaluate`].
pub fn evaluate_classifier(pairs: &[QAPair], model: &RetrievalModel) -> Result<EvalReport, ModelError> {
    model.evaluate(pairs)
}
