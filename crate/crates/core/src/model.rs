//! Pieces shared by both backends: training hyperparameters, the epoch
//! log, checkpoint headers and the minibatch training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, DatasetSplit};
use crate::metrics::MetricsError;
use crate::nn::{clip_grad_norm, AdamState, Container, ContainerError, ForwardMode, Graph, NnError, ParamStore, Var};
use crate::textkit::TextError;

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("category {0} appears in validation or test but not in train")]
    UnseenCategoryInEval(usize),
    #[error("training loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("input is empty after preprocessing")]
    EmptyAfterPreprocessing,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("no usable training examples")]
    EmptyTrainingSet,
    #[error("unknown model kind {0:?}")]
    UnknownKind(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: ModelKind, found: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Retrieval,
    Generative,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Retrieval => "retrieval",
            ModelKind::Generative => "generative",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "retrieval" => Ok(ModelKind::Retrieval),
            "generative" => Ok(ModelKind::Generative),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

fn default_min_frequency() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Minimum token count for the model vocabulary.
    #[serde(default = "default_min_frequency")]
    pub vocab_min_frequency: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            learning_rate: 3e-5,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            vocab_min_frequency: 1,
        }
    }
}

impl TrainingSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.vocab_min_frequency == 0 {
            return Err(ModelError::InvalidConfig(
                "batch_size, epochs and vocab_min_frequency must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training log. Validation columns are absent when the
/// validation split is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Renders `epoch,train_loss,train_acc,val_loss,val_acc` CSV.
pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            opt(row.val_loss),
            opt(row.val_acc)
        );
    }
    out
}

/// Reproducibility record embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub dataset_hash: String,
    pub vocab_hash: String,
    pub producer: String,
}

impl Provenance {
    pub(crate) fn new(split: &DatasetSplit, seed: u64, vocab_hash: String) -> Provenance {
        let all: Vec<_> = split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
            .cloned()
            .collect();
        Provenance {
            seed,
            dataset_hash: corpus::content_hash(&all, &[]),
            vocab_hash,
            producer: concat!("nepqa ", env!("CARGO_PKG_VERSION")).to_owned(),
        }
    }
}

/// Trained model plus its epoch log.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub log: Vec<EpochLog>,
}

/// Result of [`train_loop`]: the selected weights and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Loss and prediction tallies for one minibatch.
pub(crate) struct BatchResult {
    pub loss: Var,
    pub correct: usize,
    pub counted: usize,
}

/// Validation loss and accuracy, or `None` when there is nothing to score.
pub(crate) type Validation = Option<(f64, f64)>;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Seeded minibatch Adam with global-norm clipping.
///
/// Examples are reshuffled each epoch. The weights kept are those of the
/// epoch with the best validation accuracy (earliest on ties), or of the
/// last epoch when `validate` never returns a score.
pub(crate) fn train_loop<E, B, V>(
    examples: &[E],
    mut params: ParamStore,
    spec: &TrainingSpec,
    dropout: f64,
    batch: B,
    validate: V,
) -> Result<TrainOutcome, ModelError>
where
    B: Fn(&mut Graph, &ParamStore, &[&E], &mut ForwardMode) -> Result<BatchResult, NnError>,
    V: Fn(&ParamStore) -> Result<Validation, ModelError>,
{
    if examples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut adam = AdamState::new(spec.learning_rate);
    let mut shuffle_rng = rng_stream(spec.seed, SHUFFLE_STREAM);
    let mut mode = ForwardMode::Train {
        dropout,
        rng: rng_stream(spec.seed, DROPOUT_STREAM),
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(spec.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut counted) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(spec.batch_size) {
            let items: Vec<&E> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let r = batch(&mut g, &params, &items, &mut mode)?;
            let loss = g.value(r.loss).item();
            if !loss.is_finite() {
                return Err(ModelError::DivergedLoss { epoch });
            }
            g.backward(r.loss)?;
            let mut grads = g.param_grads();
            clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
            adam.step(&mut params, &grads)?;
            loss_sum += loss * r.counted as f64;
            correct += r.correct;
            counted += r.counted;
        }
        let val = validate(&params)?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / counted.max(1) as f64,
            train_acc: correct as f64 / counted.max(1) as f64,
            val_loss: val.map(|v| v.0),
            val_acc: val.map(|v| v.1),
        });
        if let Some((_, acc)) = val {
            if best.as_ref().is_none_or(|b| acc > b.0) {
                best = Some((acc, epoch, params.clone()));
            }
        }
    }
    Ok(match best {
        Some((_, best_epoch, params)) => TrainOutcome {
            params,
            log,
            best_epoch,
        },
        None => TrainOutcome {
            params,
            best_epoch: spec.epochs,
            log,
        },
    })
}

/// Index of the largest entry, earliest on ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of raw scores.
pub(crate) fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Model kind recorded in a checkpoint header.
pub fn checkpoint_kind(header: &str) -> Result<String, ModelError> {
    #[derive(Deserialize)]
    struct Probe {
        model_kind: String,
    }
    Ok(serde_json::from_str::<Probe>(header)?.model_kind)
}

/// Reads only the header of a checkpoint file to learn its kind.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<ModelKind, ModelError> {
    let c = Container::load(path)?;
    let kind = checkpoint_kind(&c.header)?;
    kind.parse().map_err(|_| ModelError::UnknownKind(kind))
}

pub(crate) fn expect_kind(header: &str, expected: ModelKind) -> Result<(), ModelError> {
    let found = checkpoint_kind(header)?;
    if found != expected.as_str() {
        return Err(ModelError::WrongKind { expected, found });
    }
    Ok(())
}
