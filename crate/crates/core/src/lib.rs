//! Core engine for a Devanagari FAQ chatbot with two interchangeable
//! backends: an encoder classifier that retrieves a stored answer and an
//! encoder-decoder transformer that generates one.

pub mod textkit;
pub mod corpus;
pub mod metrics;
pub mod nn;
pub mod model;
pub mod retrieval;
pub mod generative;
pub mod dialogue;

pub use corpus::{DatasetSplit, QAPair, SplitRatios};
pub use dialogue::{Backend, BackendInfo, DialogueManager, DialogueTurn, RuleSet, RulesFile, Source, TurnLog, Verdict};
pub use generative::{DecodeTrace, GenerativeModel, Seq2SeqConfig, StopReason};
pub use metrics::EvalReport;
pub use model::{EpochLog, ModelError, ModelKind, Trained, TrainingSpec};
pub use retrieval::{Classification, EncoderClassifierConfig, RetrievalModel};
pub use textkit::{PipelineConfig, Vocabulary};
