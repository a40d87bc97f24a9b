//! Rule-based dialogue management: greetings first, then an out-of-scope
//! check against the training-question vocabulary, then the backend.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::QAPair;
use crate::generative::GenerativeModel;
use crate::model::{peek_kind, ModelError, ModelKind, Provenance};
use crate::retrieval::RetrievalModel;
use crate::textkit::{normalize, preprocess, PipelineConfig, TextError, Vocabulary};

pub const DEFAULT_GREETING: &str = "नमस्ते";
pub const DEFAULT_GREETING_REPLY: &str = "नमस्ते, म हजुरलाई कसरी सहयोग गर्न सक्छु?";
pub const DEFAULT_FALLBACK: &str = "माफ गर्नुहोला, मैले तपाईंको प्रश्न बुझ्न सकिन";

#[derive(Debug, thiserror::Error)]
pub enum DialogueError {
    #[error("fallback reply must not be empty")]
    EmptyFallback,
    #[error("min_scope_matches must be at least 1")]
    InvalidMinMatches,
    #[error("greeting {0:?} is empty after normalization")]
    EmptyGreeting(String),
    #[error("rules file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk rules: `{"greetings": {...}, "fallback": "...", "min_scope_matches": 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulesFile {
    pub greetings: BTreeMap<String, String>,
    pub fallback: String,
    pub min_scope_matches: usize,
}

impl Default for RulesFile {
    fn default() -> Self {
        RulesFile {
            greetings: BTreeMap::from([(DEFAULT_GREETING.to_owned(), DEFAULT_GREETING_REPLY.to_owned())]),
            fallback: DEFAULT_FALLBACK.to_owned(),
            min_scope_matches: 1,
        }
    }
}

impl RulesFile {
    pub fn parse(text: &str) -> Result<RulesFile, DialogueError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RulesFile, DialogueError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Validated rules bound to a scope vocabulary. Greeting keys are stored
/// normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    pub greeting_map: BTreeMap<String, String>,
    pub fallback_reply: String,
    pub scope_vocab: Vocabulary,
    pub min_scope_matches: usize,
}

impl RuleSet {
    pub fn new(file: &RulesFile, scope_vocab: Vocabulary, pipeline: &PipelineConfig) -> Result<RuleSet, DialogueError> {
        if file.fallback.trim().is_empty() {
            return Err(DialogueError::EmptyFallback);
        }
        if file.min_scope_matches == 0 {
            return Err(DialogueError::InvalidMinMatches);
        }
        let mut greeting_map = BTreeMap::new();
        for (k, v) in &file.greetings {
            let key = normalize(k, pipeline);
            if key.is_empty() {
                return Err(DialogueError::EmptyGreeting(k.clone()));
            }
            greeting_map.insert(key, v.clone());
        }
        Ok(RuleSet {
            greeting_map,
            fallback_reply: file.fallback.clone(),
            scope_vocab,
            min_scope_matches: file.min_scope_matches,
        })
    }
}

/// Vocabulary over the preprocessed training questions, min frequency 1.
pub fn build_scope_vocab(train: &[QAPair], pipeline: &PipelineConfig) -> Result<Vocabulary, TextError> {
    let docs: Vec<_> = train.iter().map(|p| preprocess(&p.question_raw, pipeline)).collect();
    Vocabulary::build(&docs, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Greeting,
    OutOfScope,
    Answered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Rule,
    Retrieval,
    Generative,
}

impl From<ModelKind> for Source {
    fn from(k: ModelKind) -> Source {
        match k {
            ModelKind::Retrieval => Source::Retrieval,
            ModelKind::Generative => Source::Generative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub session_id: String,
    pub user_text: String,
    pub verdict: Verdict,
    pub reply: String,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    /// Set when the backend failed and the fallback reply was used instead.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub internal_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub answer: String,
    pub confidence: Option<f64>,
}

/// Checkpoint metadata exposed to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub n_parameters: usize,
    pub best_epoch: usize,
    pub apply_stemming: bool,
    pub max_len: usize,
    pub provenance: Provenance,
}

/// A trained model the dialogue manager can route questions to.
pub trait Backend: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn pipeline(&self) -> &PipelineConfig;
    fn scope_vocab(&self) -> &Vocabulary;
    fn respond(&self, text: &str) -> Result<BackendReply, ModelError>;
    fn info(&self) -> BackendInfo;
}

impl Backend for RetrievalModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Retrieval
    }

    fn pipeline(&self) -> &PipelineConfig {
        RetrievalModel::pipeline(self)
    }

    fn scope_vocab(&self) -> &Vocabulary {
        RetrievalModel::scope_vocab(self)
    }

    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: self.kind(),
            vocab_size: self.vocab().len(),
            n_parameters: self.params().n_values(),
            best_epoch: self.best_epoch(),
            apply_stemming: self.pipeline().apply_stemming,
            max_len: self.pipeline().max_len,
            provenance: self.provenance().clone(),
        }
    }

    fn respond(&self, text: &str) -> Result<BackendReply, ModelError> {
        let c = self.classify(text)?;
        Ok(BackendReply {
            answer: c.answer,
            confidence: Some(c.confidence),
        })
    }
}

impl Backend for GenerativeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Generative
    }

    fn pipeline(&self) -> &PipelineConfig {
        GenerativeModel::pipeline(self)
    }

    fn scope_vocab(&self) -> &Vocabulary {
        GenerativeModel::scope_vocab(self)
    }

    fn info(&self) -> BackendInfo {
        BackendInfo {
            kind: self.kind(),
            vocab_size: self.vocab().len(),
            n_parameters: self.params().n_values(),
            best_epoch: self.best_epoch(),
            apply_stemming: self.pipeline().apply_stemming,
            max_len: self.pipeline().max_len,
            provenance: self.provenance().clone(),
        }
    }

    /// Confidence is the mean per-step probability of the emitted ids.
    fn respond(&self, text: &str) -> Result<BackendReply, ModelError> {
        let (answer, trace) = self.generate(text)?;
        let n = trace.step_max_prob.len().max(1) as f64;
        Ok(BackendReply {
            answer,
            confidence: Some(trace.step_max_prob.iter().sum::<f64>() / n),
        })
    }
}

/// Loads a checkpoint of either kind.
pub fn load_backend(path: impl AsRef<Path>) -> Result<Arc<dyn Backend>, ModelError> {
    let path = path.as_ref();
    Ok(match peek_kind(path)? {
        ModelKind::Retrieval => Arc::new(RetrievalModel::load(path)?),
        ModelKind::Generative => Arc::new(GenerativeModel::load(path)?),
    })
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Applies the rules in order and never fails: a backend error or panic
/// yields the fallback reply with `internal_error` set.
///
/// Greeting matching uses the normalized input; the scope check and the
/// backend both see the input through `backend.pipeline()`, so stemming is
/// applied consistently.
pub fn handle(session_id: &str, user_text: &str, rules: &RuleSet, backend: &dyn Backend) -> DialogueTurn {
    let pipeline = backend.pipeline();
    let mut turn = DialogueTurn {
        session_id: session_id.to_owned(),
        user_text: user_text.to_owned(),
        verdict: Verdict::OutOfScope,
        reply: rules.fallback_reply.clone(),
        source: Source::Rule,
        confidence: None,
        timestamp: now_millis(),
        internal_error: None,
    };
    if let Some(reply) = rules.greeting_map.get(&normalize(user_text, pipeline)) {
        turn.verdict = Verdict::Greeting;
        turn.reply = reply.clone();
        return turn;
    }
    let matches = preprocess(user_text, pipeline)
        .iter()
        .filter(|t| rules.scope_vocab.contains(t.surface()))
        .count();
    if matches < rules.min_scope_matches {
        return turn;
    }
    match catch_unwind(AssertUnwindSafe(|| backend.respond(user_text))) {
        Ok(Ok(r)) => {
            turn.verdict = Verdict::Answered;
            turn.reply = r.answer;
            turn.source = backend.kind().into();
            turn.confidence = r.confidence;
        }
        Ok(Err(e)) => turn.internal_error = Some(e.to_string()),
        Err(_) => turn.internal_error = Some("backend panicked".to_owned()),
    }
    turn
}

/// Append-only JSON-lines sink; writes are serialized.
pub struct TurnLog {
    sink: Mutex<Box<dyn Write + Send>>,
}

impl TurnLog {
    pub fn new(sink: Box<dyn Write + Send>) -> TurnLog {
        TurnLog { sink: Mutex::new(sink) }
    }

    pub fn open(path: impl AsRef<Path>) -> std::io::Result<TurnLog> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(f)))
    }

    pub fn append(&self, turn: &DialogueTurn) -> std::io::Result<()> {
        let mut line = serde_json::to_string(turn).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut w = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(line.as_bytes())?;
        w.flush()
    }
}

/// A backend bound to its rule set, with an optional turn log.
pub struct DialogueManager {
    rules: RuleSet,
    backend: Arc<dyn Backend>,
    log: Option<Arc<TurnLog>>,
}

impl DialogueManager {
    /// The scope vocabulary and greeting normalization come from the
    /// backend so both use the same pipeline.
    pub fn new(file: &RulesFile, backend: Arc<dyn Backend>) -> Result<DialogueManager, DialogueError> {
        let rules = RuleSet::new(file, backend.scope_vocab().clone(), backend.pipeline())?;
        Ok(DialogueManager {
            rules,
            backend,
            log: None,
        })
    }

    /// Several managers may share one log.
    pub fn with_log(mut self, log: Arc<TurnLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    /// Handles one turn and appends it to the log. A failing log write is
    /// reported on stderr but does not affect the turn.
    pub fn handle(&self, session_id: &str, user_text: &str) -> DialogueTurn {
        let turn = handle(session_id, user_text, &self.rules, self.backend.as_ref());
        if let Some(log) = &self.log {
            if let Err(e) = log.append(&turn) {
                eprintln!("turn log write failed: {e}");
            }
        }
        turn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo {
        pipeline: PipelineConfig,
        scope: Vocabulary,
        fail: bool,
    }

    impl Backend for Echo {
        fn kind(&self) -> ModelKind {
            ModelKind::Retrieval
        }
        fn pipeline(&self) -> &PipelineConfig {
            &self.pipeline
        }
        fn scope_vocab(&self) -> &Vocabulary {
            &self.scope
        }
        fn info(&self) -> BackendInfo {
            unimplemented!()
        }
        fn respond(&self, text: &str) -> Result<BackendReply, ModelError> {
            if self.fail {
                return Err(ModelError::EmptyEvalSet);
            }
            Ok(BackendReply {
                answer: format!("उत्तर {text}"),
                confidence: Some(0.5),
            })
        }
    }

    fn q(text: &str) -> QAPair {
        QAPair {
            id: 0,
            question_raw: text.into(),
            answer: "उ".into(),
            category_id: 0,
        }
    }

    fn echo(fail: bool) -> Echo {
        let pipeline = PipelineConfig::default();
        let scope = build_scope_vocab(&[q("गर्भावस्था कति समय हुन्छ")], &pipeline).unwrap();
        Echo { pipeline, scope, fail }
    }

    fn manager(fail: bool) -> DialogueManager {
        DialogueManager::new(&RulesFile::default(), Arc::new(echo(fail))).unwrap()
    }

    #[test]
    fn greeting_rule() {
        let t = manager(false).handle("s", "नमस्ते");
        assert_eq!(t.verdict, Verdict::Greeting);
        assert_eq!(t.source, Source::Rule);
        assert_eq!(t.reply, DEFAULT_GREETING_REPLY);
        let t = manager(false).handle("s", "  नमस्ते ।");
        assert_eq!(t.verdict, Verdict::Greeting);
    }

    #[test]
    fn out_of_scope_rule() {
        let t = manager(false).handle("s", "qwerty zzz");
        assert_eq!(t.verdict, Verdict::OutOfScope);
        assert_eq!(t.reply, DEFAULT_FALLBACK);
        assert_eq!(t.source, Source::Rule);
        assert!(t.internal_error.is_none());
    }

    #[test]
    fn in_scope_goes_to_backend() {
        let t = manager(false).handle("s", "समय के हो");
        assert_eq!(t.verdict, Verdict::Answered);
        assert_eq!(t.source, Source::Retrieval);
        assert_eq!(t.confidence, Some(0.5));
    }

    #[test]
    fn backend_failure_is_contained() {
        let t = manager(true).handle("s", "समय");
        assert_eq!(t.verdict, Verdict::OutOfScope);
        assert_eq!(t.source, Source::Rule);
        assert!(t.internal_error.is_some());
    }

    #[test]
    fn scope_excludes_specials() {
        let v = build_scope_vocab(&[q("क ख")], &PipelineConfig::default()).unwrap();
        assert!(v.contains("क") && v.contains("ख"));
        assert_eq!(v.len(), 6);
        assert!(!v.contains("<unk>"));
        assert!(matches!(build_scope_vocab(&[], &PipelineConfig::default()), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn min_matches_knob() {
        let file = RulesFile {
            min_scope_matches: 2,
            ..Default::default()
        };
        let m = DialogueManager::new(&file, Arc::new(echo(false))).unwrap();
        assert_eq!(m.handle("s", "समय").verdict, Verdict::OutOfScope);
        assert_eq!(m.handle("s", "समय कति").verdict, Verdict::Answered);
    }

    #[test]
    fn invalid_rules() {
        let p = PipelineConfig::default();
        let v = build_scope_vocab(&[q("क")], &p).unwrap();
        let empty = RulesFile {
            fallback: " ".into(),
            ..Default::default()
        };
        assert!(matches!(RuleSet::new(&empty, v.clone(), &p), Err(DialogueError::EmptyFallback)));
        let parsed = RulesFile::parse(r#"{"greetings": {"नमस्कार": "नमस्कार!"}}"#).unwrap();
        assert_eq!(parsed.fallback, DEFAULT_FALLBACK);
        assert_eq!(parsed.min_scope_matches, 1);
    }

    #[test]
    fn log_writes_one_line_per_turn() {
        #[derive(Clone, Default)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Shared::default();
        let m = manager(false).with_log(Arc::new(TurnLog::new(Box::new(buf.clone()))));
        m.handle("a", "नमस्ते");
        m.handle("b", "समय");
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let t: DialogueTurn = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(t.session_id, "b");
        assert_eq!(t.verdict, Verdict::Answered);
    }
}
