//! Devanagari-aware text pipeline: normalization, whitespace tokenization,
//! table-driven suffix stemming, stopword removal, vocabulary construction
//! and fixed-length integer encoding.
//!
//! Every function here is pure. A [`Vocabulary`] is immutable once built and
//! can be shared across threads.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

/// Padding id.
pub const PAD: usize = 0;
/// Out-of-vocabulary id.
pub const UNK: usize = 1;
/// Sequence start id.
pub const START: usize = 2;
/// Sequence end id.
pub const END: usize = 3;

/// Surface forms of the reserved tokens. They contain characters that
/// [`normalize`] strips, so corpus text can never produce them.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

const DEFAULT_SUFFIX_TABLE: &str = include_str!("../data/suffixes.tsv");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TextError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("min_frequency must be positive")]
    InvalidMinFrequency,
    #[error("token id {id} is outside the vocabulary (size {size})")]
    UnknownId { id: usize, size: usize },
    #[error("suffix table line {line}: {reason}")]
    InvalidSuffixTable { line: usize, reason: String },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptClass {
    Devanagari,
    Latin,
    Digit,
    Other,
}

impl ScriptClass {
    pub fn of_char(c: char) -> ScriptClass {
        if matches!(get_general_category(c), GeneralCategory::DecimalNumber) {
            ScriptClass::Digit
        } else if is_devanagari(c) {
            ScriptClass::Devanagari
        } else if is_latin_letter(c) {
            ScriptClass::Latin
        } else {
            ScriptClass::Other
        }
    }

    /// Majority class over the codepoints of `s`. Ties resolve in the order
    /// devanagari, latin, digit, other.
    pub fn of_str(s: &str) -> ScriptClass {
        let mut counts = [0usize; 4];
        for c in s.chars() {
            counts[ScriptClass::of_char(c) as usize] += 1;
        }
        let order = [
            ScriptClass::Devanagari,
            ScriptClass::Latin,
            ScriptClass::Digit,
            ScriptClass::Other,
        ];
        let mut best = ScriptClass::Other;
        let mut best_count = 0;
        for class in order {
            if counts[class as usize] > best_count {
                best = class;
                best_count = counts[class as usize];
            }
        }
        best
    }
}

fn is_devanagari(c: char) -> bool {
    matches!(c, '\u{0900}'..='\u{097F}' | '\u{A8E0}'..='\u{A8FF}' | '\u{1CD0}'..='\u{1CFF}')
}

fn is_latin_letter(c: char) -> bool {
    matches!(c,
        'A'..='Z' | 'a'..='z'
        | '\u{00C0}'..='\u{00D6}' | '\u{00D8}'..='\u{00F6}' | '\u{00F8}'..='\u{024F}'
        | '\u{1E00}'..='\u{1EFF}')
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    ) || c == '\u{0964}'
        || c == '\u{0965}'
}

/// A whitespace-free, non-empty unit of normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    surface: String,
    script_class: ScriptClass,
}

impl Token {
    /// Returns `None` for empty input or input containing whitespace.
    pub fn new(surface: impl Into<String>) -> Option<Token> {
        let surface: String = surface.into();
        if surface.is_empty() || surface.chars().any(char::is_whitespace) {
            return None;
        }
        let script_class = ScriptClass::of_str(&surface);
        Some(Token {
            surface,
            script_class,
        })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn script_class(&self) -> ScriptClass {
        self.script_class
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

/// One stemming rule: strip `suffix` if at least `min_remaining` codepoints
/// are left afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixRule {
    pub suffix: String,
    pub min_remaining: usize,
}

/// Parses the suffix table format: one `<suffix>\t<min_remaining>` entry per
/// line, `#` comments and blank lines ignored. The result is stably sorted by
/// descending suffix length.
pub fn parse_suffix_table(text: &str) -> Result<Vec<SuffixRule>, TextError> {
    let mut rules = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (suffix, min) =
            trimmed
                .split_once('\t')
                .ok_or_else(|| TextError::InvalidSuffixTable {
                    line: line_no,
                    reason: "expected <suffix><TAB><min_remaining>".into(),
                })?;
        let min_remaining =
            min.trim()
                .parse::<usize>()
                .map_err(|e| TextError::InvalidSuffixTable {
                    line: line_no,
                    reason: format!("bad min_remaining {min:?}: {e}"),
                })?;
        let suffix: String = suffix.nfc().collect();
        check_suffix(&suffix).map_err(|reason| TextError::InvalidSuffixTable {
            line: line_no,
            reason,
        })?;
        rules.push(SuffixRule {
            suffix,
            min_remaining,
        });
    }
    sort_suffix_table(&mut rules);
    Ok(rules)
}

fn check_suffix(suffix: &str) -> Result<(), String> {
    if suffix.is_empty() {
        return Err("empty suffix".into());
    }
    if !suffix.chars().all(is_devanagari) {
        return Err(format!("suffix {suffix:?} is not pure Devanagari"));
    }
    Ok(())
}

fn sort_suffix_table(rules: &mut [SuffixRule]) {
    rules.sort_by_key(|r| std::cmp::Reverse(r.suffix.chars().count()));
}

/// The shipped table of common Nepali plural, case and honorific suffixes.
pub fn default_suffix_table() -> Vec<SuffixRule> {
    parse_suffix_table(DEFAULT_SUFFIX_TABLE).expect("shipped suffix table is valid")
}

/// Parses a stopword file: one token per line, blank lines ignored. Entries
/// are normalized the same way corpus text is.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.trim().nfc().collect::<String>())
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_len: usize,
    pub apply_stemming: bool,
    pub remove_stopwords: bool,
    pub strip_latin: bool,
    pub stopword_list: BTreeSet<String>,
    pub suffix_table: Vec<SuffixRule>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_len: 250,
            apply_stemming: false,
            remove_stopwords: true,
            strip_latin: true,
            stopword_list: BTreeSet::new(),
            suffix_table: default_suffix_table(),
        }
    }
}

impl PipelineConfig {
    pub fn with_stemming(mut self, on: bool) -> Self {
        self.apply_stemming = on;
        self
    }

    pub fn validate(&self) -> Result<(), TextError> {
        if self.max_len == 0 {
            return Err(TextError::InvalidConfig("max_len must be at least 1".into()));
        }
        for pair in self.suffix_table.windows(2) {
            if pair[0].suffix.chars().count() < pair[1].suffix.chars().count() {
                return Err(TextError::InvalidConfig(
                    "suffix_table must be sorted by descending suffix length".into(),
                ));
            }
        }
        for rule in &self.suffix_table {
            check_suffix(&rule.suffix).map_err(TextError::InvalidConfig)?;
        }
        Ok(())
    }
}

/// Cleans raw text: NFC, punctuation (including danda) replaced by spaces,
/// whitespace collapsed and trimmed, and Latin tokens dropped when
/// `cfg.strip_latin` is set. Idempotent.
pub fn normalize(raw: &str, cfg: &PipelineConfig) -> String {
    let composed: String = raw.nfc().collect();
    let depunct: String = composed
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    let mut out = String::with_capacity(depunct.len());
    for word in depunct.split_whitespace() {
        if cfg.strip_latin && ScriptClass::of_str(word) == ScriptClass::Latin {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out.nfc().collect()
}

/// Splits on whitespace; empty segments never become tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace().filter_map(Token::new).collect()
}

/// Strips at most one suffix: the longest table entry that matches, and only
/// if the stem left behind keeps at least that entry's minimum length.
pub fn stem(token: &Token, cfg: &PipelineConfig) -> Token {
    if token.script_class != ScriptClass::Devanagari {
        return token.clone();
    }
    let surface = token.surface();
    let len = surface.chars().count();
    let Some(rule) = cfg
        .suffix_table
        .iter()
        .find(|rule| surface.ends_with(rule.suffix.as_str()))
    else {
        return token.clone();
    };
    let remaining = len - rule.suffix.chars().count();
    if remaining < rule.min_remaining || remaining == 0 {
        return token.clone();
    }
    let stem = &surface[..surface.len() - rule.suffix.len()];
    Token::new(stem).unwrap_or_else(|| token.clone())
}

pub fn remove_stopwords(tokens: Vec<Token>, cfg: &PipelineConfig) -> Vec<Token> {
    if !cfg.remove_stopwords || cfg.stopword_list.is_empty() {
        return tokens;
    }
    tokens
        .into_iter()
        .filter(|t| !cfg.stopword_list.contains(t.surface()))
        .collect()
}

/// normalize → tokenize → stopword removal → optional stemming.
pub fn preprocess(raw: &str, cfg: &PipelineConfig) -> Vec<Token> {
    let tokens = remove_stopwords(tokenize(&normalize(raw, cfg)), cfg);
    if cfg.apply_stemming {
        tokens.iter().map(|t| stem(t, cfg)).collect()
    } else {
        tokens
    }
}

/// Dense token ↔ id map. Ids 0..4 are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Specials first, then every token with count ≥ `min_frequency` by
    /// descending count, ties by codepoint order. Document order is
    /// irrelevant.
    pub fn build<'a, I, S>(corpus: I, min_frequency: usize) -> Result<Vocabulary, TextError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[Token]> + 'a,
    {
        if min_frequency == 0 {
            return Err(TextError::InvalidMinFrequency);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in corpus {
            for tok in doc.as_ref() {
                total += 1;
                *counts.entry(tok.surface().to_owned()).or_default() += 1;
            }
        }
        if total == 0 {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_frequency)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    fn from_tokens(id_to_token: Vec<String>, min_frequency: usize) -> Vocabulary {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.token_to_id.get(surface).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Corpus-token membership; the specials never count.
    pub fn contains(&self, surface: &str) -> bool {
        self.id(surface).is_some_and(|id| !Self::is_special(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Ids without bounds or padding; unknown tokens become [`UNK`].
    pub fn ids(&self, tokens: &[Token]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.surface()).unwrap_or(UNK))
            .collect()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            min_frequency: usize,
            tokens: &'a [String],
        }
        Repr {
            min_frequency: self.min_frequency,
            tokens: &self.id_to_token,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            min_frequency: usize,
            tokens: Vec<String>,
        }
        let repr = Repr::deserialize(d)?;
        if repr.tokens.len() < SPECIAL_TOKENS.len()
            || repr.tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(serde::de::Error::custom(
                "vocabulary must start with the four special tokens",
            ));
        }
        let unique: BTreeSet<&String> = repr.tokens.iter().collect();
        if unique.len() != repr.tokens.len() {
            return Err(serde::de::Error::custom("vocabulary has duplicate tokens"));
        }
        Ok(Vocabulary::from_tokens(repr.tokens, repr.min_frequency))
    }
}

/// Fixed-length encoding to exactly `cfg.max_len` ids. With `add_bounds`
/// the sequence is wrapped in START … END and over-long input is truncated
/// so that END remains the last non-pad id.
pub fn encode(
    tokens: &[Token],
    vocab: &Vocabulary,
    cfg: &PipelineConfig,
    add_bounds: bool,
) -> Vec<usize> {
    let max_len = cfg.max_len;
    let mut out = Vec::with_capacity(max_len);
    let ids = vocab.ids(tokens);
    if add_bounds {
        let body = max_len.saturating_sub(2);
        if max_len >= 2 {
            out.push(START);
        }
        out.extend(ids.into_iter().take(body));
        out.push(END);
    } else {
        out.extend(ids.into_iter().take(max_len));
    }
    out.resize(max_len, PAD);
    out
}

/// Inverse of [`encode`]: specials dropped, tokens joined by single spaces.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Result<String, TextError> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(TextError::UnknownId {
            id,
            size: vocab.len(),
        })?;
        if !Vocabulary::is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

/// Concatenates token surfaces with single spaces.
pub fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::surface)
        .collect::<Vec<_>>()
        .join(" ")
}
