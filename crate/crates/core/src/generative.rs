//! Generative backend: an encoder-decoder transformer trained with teacher
//! forcing and decoded greedily.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, QAPair};
use crate::dialogue::build_scope_vocab;
use crate::metrics::{bleu, BleuInputs, EvalReport, MetricsError};
use crate::model::{
    argmax, expect_kind, rng_stream, softmax_row, train_loop, BatchResult, ModelError, ModelKind,
    Provenance, Trained, TrainingSpec, INIT_STREAM,
};
use crate::nn::layers::{embed, init_layer_norm, init_linear, layer_norm, linear};
use crate::nn::{
    positional_encoding, AttentionConfig, BlockDims, Container, DecoderLayer, EncoderLayer,
    ForwardMode, Graph, Mask, NnError, ParamStore, Tensor, Var,
};
use crate::textkit::{decode, encode, preprocess, PipelineConfig, Token, Vocabulary, END, PAD, START, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
    /// Set from the training vocabulary.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Set from the pipeline configuration.
    pub max_len: usize,
    pub dropout_rate: f64,
    pub max_decode_len: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_len: 250,
            dropout_rate: 0.1,
            max_decode_len: 250,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        AttentionConfig::new(self.d_model, self.n_heads)?;
        if !self.d_model.is_multiple_of(2) {
            return Err(NnError::OddDModel(self.d_model).into());
        }
        if self.vocab_size <= crate::textkit::SPECIAL_TOKENS.len() {
            return Err(ModelError::InvalidConfig("vocab_size must exceed the specials".into()));
        }
        if self.max_len < 2 {
            return Err(ModelError::InvalidConfig("max_len must be at least 2".into()));
        }
        if self.max_decode_len == 0 || self.max_decode_len > self.max_len {
            return Err(ModelError::InvalidConfig(format!(
                "max_decode_len must be in 1..={}, got {}",
                self.max_len, self.max_decode_len
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig("layer counts and d_ff must be positive".into()));
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndToken,
    LengthLimit,
}

/// Record of one greedy decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Emitted ids, ending with [`END`] when `stop_reason` is `EndToken`.
    pub emitted: Vec<usize>,
    /// Probability of each emitted id at its step.
    pub step_max_prob: Vec<f64>,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_kind: String,
    config: Seq2SeqConfig,
    pipeline: PipelineConfig,
    training: TrainingSpec,
    vocab: Vocabulary,
    scope_vocab: Vocabulary,
    best_epoch: usize,
    provenance: Provenance,
}

/// A trained seq2seq model. Immutable and safe to share across threads.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    header: Header,
    params: ParamStore,
    positions: Tensor,
}

fn key_mask(rows: usize, ids: &[usize]) -> Option<Rc<Mask>> {
    let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
    (!valid.iter().all(|v| *v)).then(|| Rc::new(Mask::keys(rows, &valid)))
}

fn encode_source(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &Seq2SeqConfig,
    positions: &Tensor,
    src: &[usize],
    mode: &mut ForwardMode,
) -> Result<Var, NnError> {
    let mask = key_mask(src.len(), src);
    let mut x = embed(g, store, "embed", src, positions)?;
    x = mode.dropout(g, x)?;
    for l in 0..cfg.n_enc_layers {
        x = EncoderLayer::new(format!("enc.{l}"), cfg.dims()).forward(g, store, x, mask.clone(), mode)?;
    }
    layer_norm(g, store, "enc.norm", x)
}

/// Next-token logits `[dec_in.len() × vocab]` given encoder memory.
#[allow(clippy::too_many_arguments)]
fn decoder_logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &Seq2SeqConfig,
    positions: &Tensor,
    memory: Var,
    src: &[usize],
    dec_in: &[usize],
    mode: &mut ForwardMode,
) -> Result<Var, NnError> {
    let t = dec_in.len();
    let causal = Rc::new(Mask::causal(t));
    let cross = key_mask(t, src);
    let mut x = embed(g, store, "embed", dec_in, positions)?;
    x = mode.dropout(g, x)?;
    for l in 0..cfg.n_dec_layers {
        x = DecoderLayer::new(format!("dec.{l}"), cfg.dims()).forward(
            g,
            store,
            x,
            memory,
            causal.clone(),
            cross.clone(),
            mode,
        )?;
    }
    let x = layer_norm(g, store, "dec.norm", x)?;
    linear(g, store, "out", x)
}

fn init_params(cfg: &Seq2SeqConfig, seed: u64) -> ParamStore {
    let mut rng = rng_stream(seed, INIT_STREAM);
    let mut store = ParamStore::new();
    store.xavier("embed", cfg.vocab_size, cfg.d_model, &mut rng);
    for l in 0..cfg.n_enc_layers {
        EncoderLayer::new(format!("enc.{l}"), cfg.dims()).init(&mut store, &mut rng);
    }
    init_layer_norm(&mut store, "enc.norm", cfg.d_model);
    for l in 0..cfg.n_dec_layers {
        DecoderLayer::new(format!("dec.{l}"), cfg.dims()).init(&mut store, &mut rng);
    }
    init_layer_norm(&mut store, "dec.norm", cfg.d_model);
    init_linear(&mut store, "out", cfg.d_model, cfg.vocab_size, &mut rng);
    store
}

fn source_ids(question: &str, vocab: &Vocabulary, pipeline: &PipelineConfig) -> Vec<usize> {
    let tokens = preprocess(question, pipeline);
    let mut ids = encode(&tokens, vocab, pipeline, false);
    ids.truncate(tokens.len().min(pipeline.max_len));
    ids
}

/// Teacher-forcing pair: `START + answer` in, `answer + END` out, both
/// unpadded.
fn target_ids(answer: &[Token], vocab: &Vocabulary, pipeline: &PipelineConfig) -> (Vec<usize>, Vec<usize>) {
    let full = encode(answer, vocab, pipeline, true);
    let n = full.iter().position(|&i| i == END).expect("bounded encoding ends with END") + 1;
    (full[..n - 1].to_vec(), full[1..n].to_vec())
}

struct Example {
    src: Vec<usize>,
    dec_in: Vec<usize>,
    target: Vec<usize>,
}

fn make_examples(pairs: &[QAPair], vocab: &Vocabulary, pipeline: &PipelineConfig) -> Vec<Example> {
    pairs
        .iter()
        .filter_map(|p| {
            let src = source_ids(&p.question_raw, vocab, pipeline);
            if src.is_empty() {
                return None;
            }
            let (dec_in, target) = target_ids(&preprocess(&p.answer, pipeline), vocab, pipeline);
            Some(Example { src, dec_in, target })
        })
        .collect()
}

/// Teacher-forced loss and per-token accuracy summed over `examples`.
fn teacher_forced_scores(
    store: &ParamStore,
    cfg: &Seq2SeqConfig,
    positions: &Tensor,
    examples: &[Example],
) -> Result<Option<(f64, f64)>, ModelError> {
    let (mut loss, mut correct, mut counted) = (0.0, 0usize, 0usize);
    for ex in examples {
        let mut g = Graph::new();
        let mode = &mut ForwardMode::Eval;
        let memory = encode_source(&mut g, store, cfg, positions, &ex.src, mode)?;
        let z = decoder_logits(&mut g, store, cfg, positions, memory, &ex.src, &ex.dec_in, mode)?;
        for (i, &t) in ex.target.iter().enumerate() {
            let row = g.value(z).row(i);
            loss -= softmax_row(row)[t].ln();
            correct += usize::from(argmax(row) == t);
        }
        counted += ex.target.len();
    }
    if counted == 0 {
        return Ok(None);
    }
    Ok(Some((loss / counted as f64, correct as f64 / counted as f64)))
}

/// Trains the seq2seq model on `split.train` with a vocabulary shared by
/// questions and answers. Weights are selected by validation per-token
/// accuracy.
///
/// `vocab_size` and `max_len` in `cfg` are overwritten from the data and
/// pipeline. Pairs whose question is empty after preprocessing are skipped.
pub fn train_seq2seq(
    split: &DatasetSplit,
    cfg: &Seq2SeqConfig,
    spec: &TrainingSpec,
    pipeline: &PipelineConfig,
) -> Result<Trained<GenerativeModel>, ModelError> {
    pipeline.validate()?;
    spec.validate()?;
    let docs: Vec<Vec<Token>> = split
        .train
        .iter()
        .flat_map(|p| [preprocess(&p.question_raw, pipeline), preprocess(&p.answer, pipeline)])
        .collect();
    let vocab = Vocabulary::build(&docs, spec.vocab_min_frequency)?;
    let scope_vocab = build_scope_vocab(&split.train, pipeline)?;

    let mut cfg = cfg.clone();
    cfg.vocab_size = vocab.len();
    cfg.max_len = pipeline.max_len;
    cfg.validate()?;
    let positions = positional_encoding(cfg.max_len, cfg.d_model)?;

    let train = make_examples(&split.train, &vocab, pipeline);
    let val = make_examples(&split.validation, &vocab, pipeline);

    let outcome = train_loop(
        &train,
        init_params(&cfg, spec.seed),
        spec,
        cfg.dropout_rate,
        |g, store, batch, mode| {
            let mut rows = Vec::with_capacity(batch.len());
            let mut targets = Vec::new();
            for ex in batch {
                let memory = encode_source(g, store, &cfg, &positions, &ex.src, mode)?;
                rows.push(decoder_logits(g, store, &cfg, &positions, memory, &ex.src, &ex.dec_in, mode)?);
                targets.extend_from_slice(&ex.target);
            }
            let z = g.concat_rows(&rows)?;
            let correct = targets
                .iter()
                .enumerate()
                .filter(|(i, &t)| argmax(g.value(z).row(*i)) == t)
                .count();
            let loss = g.cross_entropy(z, &targets, Some(PAD))?;
            Ok(BatchResult {
                loss,
                correct,
                counted: targets.len(),
            })
        },
        |store| teacher_forced_scores(store, &cfg, &positions, &val),
    )?;

    let provenance = Provenance::new(split, spec.seed, vocab.content_hash());
    let header = Header {
        model_kind: ModelKind::Generative.as_str().to_owned(),
        config: cfg,
        pipeline: pipeline.clone(),
        training: spec.clone(),
        vocab,
        scope_vocab,
        best_epoch: outcome.best_epoch,
        provenance,
    };
    Ok(Trained {
        model: GenerativeModel {
            header,
            params: outcome.params,
            positions,
        },
        log: outcome.log,
    })
}

impl GenerativeModel {
    pub fn config(&self) -> &Seq2SeqConfig {
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

    pub fn provenance(&self) -> &Provenance {
        &self.header.provenance
    }

    pub fn best_epoch(&self) -> usize {
        self.header.best_epoch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Source ids for `question` after the model's pipeline, unpadded.
    pub fn source_ids(&self, question: &str) -> Vec<usize> {
        source_ids(question, self.vocab(), self.pipeline())
    }

    /// Decoder logits for an explicit decoder input sequence.
    pub fn teacher_forced_logits(&self, question: &str, dec_in: &[usize]) -> Result<Tensor, ModelError> {
        let src = self.source_ids(question);
        if src.is_empty() {
            return Err(ModelError::EmptyAfterPreprocessing);
        }
        let mut g = Graph::new();
        let mode = &mut ForwardMode::Eval;
        let cfg = self.config();
        let memory = encode_source(&mut g, &self.params, cfg, &self.positions, &src, mode)?;
        let z = decoder_logits(&mut g, &self.params, cfg, &self.positions, memory, &src, dec_in, mode)?;
        Ok(g.value(z).clone())
    }

    /// Greedy decoding from START until END or `max_decode_len` ids. PAD,
    /// UNK and START are never emitted.
    pub fn generate(&self, question: &str) -> Result<(String, DecodeTrace), ModelError> {
        let src = self.source_ids(question);
        if src.is_empty() {
            return Err(ModelError::EmptyAfterPreprocessing);
        }
        let cfg = self.config();
        let mut g = Graph::new();
        let memory = encode_source(&mut g, &self.params, cfg, &self.positions, &src, &mut ForwardMode::Eval)?;
        let memory = g.value(memory).clone();

        let mut prefix = vec![START];
        let mut trace = DecodeTrace {
            emitted: Vec::new(),
            step_max_prob: Vec::new(),
            stop_reason: StopReason::LengthLimit,
        };
        while trace.emitted.len() < cfg.max_decode_len {
            let mut g = Graph::new();
            let mem = g.input(memory.clone());
            let z = decoder_logits(&mut g, &self.params, cfg, &self.positions, mem, &src, &prefix, &mut ForwardMode::Eval)?;
            let last = g.value(z).row(prefix.len() - 1);
            let p = softmax_row(last);
            let mut allowed = last.to_vec();
            for banned in [PAD, UNK, START] {
                allowed[banned] = f64::NEG_INFINITY;
            }
            let next = argmax(&allowed);
            trace.emitted.push(next);
            trace.step_max_prob.push(p[next]);
            if next == END {
                trace.stop_reason = StopReason::EndToken;
                break;
            }
            prefix.push(next);
        }
        let answer = decode(&trace.emitted, self.vocab())?;
        Ok((answer, trace))
    }

    /// Corpus BLEU-1..`max_n` of generated against reference answers, plus
    /// teacher-forced per-token accuracy and exact-match rate.
    pub fn evaluate(&self, pairs: &[QAPair], max_n: usize) -> Result<EvalReport, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyEvalSet);
        }
        if !(1..=4).contains(&max_n) {
            return Err(MetricsError::InvalidOrder.into());
        }
        let pipeline = self.pipeline();
        let mut candidates = Vec::with_capacity(pairs.len());
        let mut references = Vec::with_capacity(pairs.len());
        let mut exact = 0usize;
        for p in pairs {
            let reference: Vec<String> = preprocess(&p.answer, pipeline)
                .iter()
                .map(|t| t.surface().to_owned())
                .collect();
            let candidate: Vec<String> = match self.generate(&p.question_raw) {
                Ok((text, _)) => text.split_whitespace().map(str::to_owned).collect(),
                Err(ModelError::EmptyAfterPreprocessing) => Vec::new(),
                Err(e) => return Err(e),
            };
            exact += usize::from(candidate == reference);
            candidates.push(candidate);
            references.push(reference);
        }
        let scores = match bleu(&BleuInputs::single(candidates, references, max_n)) {
            Ok(s) => s,
            Err(MetricsError::EmptyCandidate) => (1..=max_n).map(|n| (n, 0.0)).collect(),
            Err(e) => return Err(e.into()),
        };
        let examples = make_examples(pairs, self.vocab(), pipeline);
        let tf = teacher_forced_scores(&self.params, self.config(), &self.positions, &examples)?;
        Ok(EvalReport {
            bleu: scores.into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
            per_token_accuracy: Some(tf.map_or(0.0, |t| t.1)),
            exact_match: Some(exact as f64 / pairs.len() as f64),
            n_samples: pairs.len(),
            ..Default::default()
        })
    }

    pub fn to_container(&self) -> Result<Container, ModelError> {
        Ok(Container {
            header: serde_json::to_string(&self.header)?,
            tensors: self.params.clone(),
        })
    }

    pub fn from_container(c: Container) -> Result<GenerativeModel, ModelError> {
        expect_kind(&c.header, ModelKind::Generative)?;
        let header: Header = serde_json::from_str(&c.header)?;
        header.config.validate()?;
        let positions = positional_encoding(header.config.max_len, header.config.d_model)?;
        let model = GenerativeModel {
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

    pub fn load(path: impl AsRef<Path>) -> Result<GenerativeModel, ModelError> {
        Self::from_container(Container::load(path)?)
    }
}

/// Free-function form of [`GenerativeModel::generate`].
pub fn generate(question: &str, model: &GenerativeModel) -> Result<(String, DecodeTrace), ModelError> {
    model.generate(question)
}

/// Free-function form of [`GenerativeModel::evaluate`].
pub fn evaluate_seq2seq(pairs: &[QAPair], model: &GenerativeModel, max_n: usize) -> Result<EvalReport, ModelError> {
    model.evaluate(pairs, max_n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: usize, q: &str, a: &str) -> QAPair {
        QAPair {
            id,
            question_raw: q.into(),
            answer: a.into(),
            category_id: id,
        }
    }

    fn tiny() -> GenerativeModel {
        let split = DatasetSplit {
            train: vec![pair(0, "क ख", "ग घ ङ"), pair(1, "च छ", "ज झ")],
            validation: vec![],
            test: vec![],
            seed: 0,
        };
        let cfg = Seq2SeqConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            dropout_rate: 0.0,
            max_decode_len: 6,
            ..Default::default()
        };
        let pipeline = PipelineConfig {
            max_len: 8,
            ..Default::default()
        };
        let spec = TrainingSpec {
            learning_rate: 1e-2,
            epochs: 2,
            ..Default::default()
        };
        train_seq2seq(&split, &cfg, &spec, &pipeline).unwrap().model
    }

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let m = tiny();
        let toks = preprocess("ग घ", m.pipeline());
        let (dec_in, target) = target_ids(&toks, m.vocab(), m.pipeline());
        assert_eq!(dec_in[0], START);
        assert_eq!(*target.last().unwrap(), END);
        assert_eq!(&dec_in[1..], &target[..target.len() - 1]);
    }

    #[test]
    fn long_answers_keep_end() {
        let m = tiny();
        let toks = preprocess(&"ग ".repeat(40), m.pipeline());
        let (dec_in, target) = target_ids(&toks, m.vocab(), m.pipeline());
        assert_eq!(dec_in.len(), m.pipeline().max_len - 1);
        assert_eq!(*target.last().unwrap(), END);
    }

    #[test]
    fn trace_respects_contract() {
        let m = tiny();
        let (answer, trace) = m.generate("क ख").unwrap();
        assert!(trace.emitted.len() <= m.config().max_decode_len);
        assert_eq!(trace.emitted.len(), trace.step_max_prob.len());
        assert!(!trace.emitted.iter().any(|&i| i == PAD || i == START));
        let ends = trace.emitted.iter().filter(|&&i| i == END).count();
        match trace.stop_reason {
            StopReason::EndToken => assert!(ends == 1 && *trace.emitted.last().unwrap() == END),
            StopReason::LengthLimit => assert_eq!(ends, 0),
        }
        assert!(!answer.contains('<'));
        let json = serde_json::to_string(&trace).unwrap();
        assert!(json.contains("stop_reason"));
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let base = [START, 4, 5, 6, 7];
        let z = m.teacher_forced_logits("क ख", &base).unwrap();
        let mut other = base;
        other[3] = 8;
        other[4] = 4;
        let z2 = m.teacher_forced_logits("क ख", &other).unwrap();
        for t in 0..3 {
            assert_eq!(z.row(t), z2.row(t), "position {t}");
        }
        assert_ne!(z.row(3), z2.row(3));
    }

    #[test]
    fn config_rejects_long_decode() {
        let cfg = Seq2SeqConfig {
            vocab_size: 10,
            max_len: 8,
            max_decode_len: 9,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn roundtrip_and_eval() {
        let m = tiny();
        let back = GenerativeModel::from_container(Container::read_from(&m.to_container().unwrap().to_bytes()[..]).unwrap())
            .unwrap();
        assert_eq!(back.generate("च छ").unwrap(), m.generate("च छ").unwrap());
        let r = m.evaluate(&[pair(0, "क ख", "ग घ ङ")], 2).unwrap();
        assert_eq!(r.bleu.len(), 2);
        assert!(r.per_token_accuracy.is_some());
        assert!(m.evaluate(&[], 2).is_err());
        assert!(m.evaluate(&[pair(0, "क", "ग")], 5).is_err());
    }
}
