//! Dataset ingestion (JSON-lines, with a CSV converter), deduplication,
//! stratified seeded splitting and corpus statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::textkit::{normalize, preprocess, PipelineConfig, Token, Vocabulary};

/// Categories smaller than this go entirely to the training split.
pub const STRATIFY_MIN_MEMBERS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate record id {0}")]
    DuplicateId(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 10 pairs to split, got {0}")]
    TooFewPairs(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios(SplitRatios),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: usize,
    pub question_raw: String,
    pub answer: String,
    pub category_id: usize,
}

/// Pairs plus the interned category names (index = category id).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub pairs: Vec<QAPair>,
    pub categories: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<usize>,
    question: String,
    answer: String,
    category: String,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: usize,
    question: &'a str,
    answer: &'a str,
    category: &'a str,
}

struct Builder {
    dataset: Dataset,
    index: HashMap<String, usize>,
    seen_ids: HashSet<usize>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            dataset: Dataset::default(),
            index: HashMap::new(),
            seen_ids: HashSet::new(),
        }
    }

    fn push(&mut self, line: usize, rec: Record) -> Result<(), CorpusError> {
        let id = rec.id.unwrap_or(self.dataset.pairs.len());
        if !self.seen_ids.insert(id) {
            return Err(CorpusError::DuplicateId(id));
        }
        let plain = PipelineConfig {
            strip_latin: false,
            ..PipelineConfig::default()
        };
        if normalize(&rec.question, &plain).is_empty() {
            return Err(CorpusError::Parse {
                line,
                reason: "question is empty after normalization".into(),
            });
        }
        let next = self.index.len();
        let category_id = *self.index.entry(rec.category.clone()).or_insert_with(|| {
            self.dataset.categories.push(rec.category.clone());
            next
        });
        self.dataset.pairs.push(QAPair {
            id,
            question_raw: rec.question,
            answer: rec.answer,
            category_id,
        });
        Ok(())
    }

    fn finish(self) -> Result<Dataset, CorpusError> {
        if self.dataset.pairs.is_empty() {
            return Err(CorpusError::EmptyDataset);
        }
        Ok(self.dataset)
    }
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers in errors
/// are 1-based. Records without an `id` get their record index.
pub fn parse_dataset(text: &str) -> Result<Dataset, CorpusError> {
    parse_dataset_with(text, &[])
}

/// Like [`parse_dataset`], but category ids start from the given names so
/// separately stored splits agree on ids. Unknown names are appended.
pub fn parse_dataset_with(text: &str, categories: &[String]) -> Result<Dataset, CorpusError> {
    let mut b = Builder::new();
    for name in categories {
        if !b.index.contains_key(name) {
            b.index.insert(name.clone(), b.dataset.categories.len());
            b.dataset.categories.push(name.clone());
        }
    }
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        b.push(idx + 1, rec)?;
    }
    b.finish()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

/// Reads CSV with a header row naming `question`, `answer`, `category`
/// (and optionally `id`) columns.
pub fn parse_csv(reader: impl Read) -> Result<Dataset, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut b = Builder::new();
    for (idx, row) in rdr.deserialize::<Record>().enumerate() {
        // header is line 1
        let line = idx + 2;
        let rec = row.map_err(|e| CorpusError::Parse {
            line,
            reason: e.to_string(),
        })?;
        b.push(line, rec)?;
    }
    b.finish()
}

/// Serializes pairs as canonical JSON-lines (`id, question, answer,
/// category`), one record per line.
pub fn to_jsonl(pairs: &[QAPair], categories: &[String]) -> String {
    let mut out = String::new();
    for p in pairs {
        let rec = RecordOut {
            id: p.id,
            question: &p.question_raw,
            answer: &p.answer,
            category: categories
                .get(p.category_id)
                .map(String::as_str)
                .unwrap_or(""),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of the canonical JSON-lines form.
pub fn content_hash(pairs: &[QAPair], categories: &[String]) -> String {
    hex::encode(Sha256::digest(to_jsonl(pairs, categories).as_bytes()))
}

/// Drops every pair whose normalized question and answer both equal those
/// of an earlier pair.
pub fn deduplicate(pairs: &[QAPair], cfg: &PipelineConfig) -> Vec<QAPair> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert((normalize(&p.question_raw, cfg), normalize(&p.answer, cfg))))
        .cloned()
        .collect()
}

/// Rewrites question and answer text in normalized form and drops pairs
/// whose question normalizes to nothing.
pub fn normalize_pairs(pairs: &[QAPair], cfg: &PipelineConfig) -> Vec<QAPair> {
    pairs
        .iter()
        .filter_map(|p| {
            let question_raw = normalize(&p.question_raw, cfg);
            (!question_raw.is_empty()).then(|| QAPair {
                question_raw,
                answer: normalize(&p.answer, cfg),
                ..p.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            validation: 0.2,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<QAPair>,
    pub validation: Vec<QAPair>,
    pub test: Vec<QAPair>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded stratified split.
///
/// Members of each category with at least [`STRATIFY_MIN_MEMBERS`] pairs are
/// shuffled, then all such categories are interleaved so every category is
/// spread evenly along one sequence, which is cut into contiguous
/// train/validation/test runs. Smaller categories go to train whole.
/// Validation and test sizes are rounded from the size of the stratified
/// pool. Each part is returned in id order.
pub fn split(pairs: &[QAPair], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit, CorpusError> {
    if pairs.len() < 10 {
        return Err(CorpusError::TooFewPairs(pairs.len()));
    }
    let r = ratios;
    if [r.train, r.validation, r.test].iter().any(|x| !x.is_finite() || *x < 0.0)
        || (r.train + r.validation + r.test - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::InvalidRatios(ratios));
    }

    let mut by_category: BTreeMap<usize, Vec<&QAPair>> = BTreeMap::new();
    for p in pairs {
        by_category.entry(p.category_id).or_default().push(p);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<QAPair> = Vec::new();
    // (position within category, category size, category id, pair)
    let mut pool: Vec<(usize, usize, usize, &QAPair)> = Vec::new();
    for (&cat, members) in by_category.iter_mut() {
        if members.len() < STRATIFY_MIN_MEMBERS {
            train.extend(members.iter().map(|p| (*p).clone()));
            continue;
        }
        members.shuffle(&mut rng);
        let size = members.len();
        pool.extend(members.iter().enumerate().map(|(j, p)| (j, size, cat, *p)));
    }
    // Order by (j + 1/2) / size, exactly, via cross-multiplication.
    pool.sort_by(|a, b| {
        let lhs = (2 * a.0 as u128 + 1) * b.1 as u128;
        let rhs = (2 * b.0 as u128 + 1) * a.1 as u128;
        lhs.cmp(&rhs).then(a.2.cmp(&b.2))
    });

    let m = pool.len() as f64;
    let n_val = (r.validation * m).round() as usize;
    let n_test = ((r.test * m).round() as usize).min(pool.len() - n_val);
    let n_train_pool = pool.len() - n_val - n_test;

    let mut validation = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    for (i, (_, _, _, p)) in pool.into_iter().enumerate() {
        let p = p.clone();
        if i < n_train_pool {
            train.push(p);
        } else if i < n_train_pool + n_val {
            validation.push(p);
        } else {
            test.push(p);
        }
    }
    for part in [&mut train, &mut validation, &mut test] {
        part.sort_by_key(|p| p.id);
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_pairs: usize,
    pub n_categories: usize,
    pub vocab_size_raw: usize,
    pub vocab_size_stemmed: usize,
    pub max_question_len: usize,
    pub max_answer_len: usize,
}

/// Token-level statistics over pairs whose question survives
/// preprocessing. Vocabulary sizes count question and answer tokens at
/// min frequency 1, specials included; lengths exclude bounds and padding.
pub fn stats(pairs: &[QAPair], cfg: &PipelineConfig) -> CorpusStats {
    let raw_cfg = cfg.clone().with_stemming(false);
    let stem_cfg = cfg.clone().with_stemming(true);
    let mut raw_docs: Vec<Vec<Token>> = Vec::new();
    let mut stem_docs: Vec<Vec<Token>> = Vec::new();
    let mut out = CorpusStats::default();
    let mut categories = HashSet::new();
    for p in pairs {
        let q = preprocess(&p.question_raw, &raw_cfg);
        if q.is_empty() {
            continue;
        }
        let a = preprocess(&p.answer, &raw_cfg);
        out.n_pairs += 1;
        categories.insert(p.category_id);
        out.max_question_len = out.max_question_len.max(q.len());
        out.max_answer_len = out.max_answer_len.max(a.len());
        stem_docs.push(preprocess(&p.question_raw, &stem_cfg));
        stem_docs.push(preprocess(&p.answer, &stem_cfg));
        raw_docs.push(q);
        raw_docs.push(a);
    }
    out.n_categories = categories.len();
    out.vocab_size_raw = Vocabulary::build(raw_docs.iter(), 1).map_or(0, |v| v.len());
    out.vocab_size_stemmed = Vocabulary::build(stem_docs.iter(), 1).map_or(0, |v| v.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(id: usize, q: &str, a: &str, cat: usize) -> QAPair {
        QAPair {
            id,
            question_raw: q.into(),
            answer: a.into(),
            category_id: cat,
        }
    }

    /// `sizes[c]` pairs in category c, ids assigned sequentially.
    fn corpus(sizes: &[usize]) -> Vec<QAPair> {
        let mut out = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                let id = out.len();
                out.push(pair(id, &format!("प्रश्न {id}"), &format!("उत्तर {c}"), c));
            }
        }
        out
    }

    #[test]
    fn load_example() {
        let text = r#"{"question":"क ख","answer":"ग","category":"a"}
{"question":"घ","answer":"ङ","category":"b"}
{"question":"च","answer":"छ","category":"a"}
"#;
        let ds = parse_dataset(text).unwrap();
        assert_eq!(ds.pairs.len(), 3);
        assert_eq!(ds.categories, ["a", "b"]);
        let cats: Vec<_> = ds.pairs.iter().map(|p| p.category_id).collect();
        assert_eq!(cats, [0, 1, 0]);
        assert_eq!(ds.pairs[2].id, 2);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(parse_dataset(""), Err(CorpusError::EmptyDataset)));
        assert!(matches!(parse_dataset("\n\n"), Err(CorpusError::EmptyDataset)));
        let bad = "{\"question\":\"क\",\"answer\":\"ग\",\"category\":\"a\"}\n{not json\n";
        assert!(matches!(parse_dataset(bad), Err(CorpusError::Parse { line: 2, .. })));
        let missing = "{\"question\":\"क\",\"category\":\"a\"}\n";
        assert!(matches!(parse_dataset(missing), Err(CorpusError::Parse { line: 1, .. })));
        let dup = "{\"id\":5,\"question\":\"क\",\"answer\":\"ग\",\"category\":\"a\"}\n{\"id\":5,\"question\":\"ख\",\"answer\":\"ग\",\"category\":\"a\"}\n";
        assert!(matches!(parse_dataset(dup), Err(CorpusError::DuplicateId(5))));
        let empty_q = "{\"question\":\" ।! \",\"answer\":\"ग\",\"category\":\"a\"}\n";
        assert!(matches!(parse_dataset(empty_q), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn preseeded_categories_fix_ids() {
        let text = r#"{"question":"क","answer":"ख","category":"b"}"#;
        let d = parse_dataset_with(text, &["a".into(), "b".into(), "a".into()]).unwrap();
        assert_eq!(d.categories, vec!["a", "b"]);
        assert_eq!(d.pairs[0].category_id, 1);
        let d = parse_dataset_with(text, &["a".into()]).unwrap();
        assert_eq!(d.pairs[0].category_id, 1);
    }

    #[test]
    fn jsonl_roundtrip_and_csv() {
        let text = "question,answer,category\n\"क, ख\",ग,a\nघ,ङ,b\n";
        let ds = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.pairs[0].question_raw, "क, ख");
        let again = parse_dataset(&to_jsonl(&ds.pairs, &ds.categories)).unwrap();
        assert_eq!(again, ds);
        assert!(matches!(
            parse_csv("question,answer\nक,ख\n".as_bytes()),
            Err(CorpusError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn dedup_examples() {
        let cfg = PipelineConfig::default();
        let ps = vec![pair(0, "क१", "ख१", 0), pair(1, "क१", "ख१", 0), pair(2, "क२", "ख२", 0)];
        let kept: Vec<_> = deduplicate(&ps, &cfg).iter().map(|p| p.id).collect();
        assert_eq!(kept, [0, 2]);
        let ps = vec![pair(0, "क", "ख", 0), pair(1, "क", "ग", 0)];
        assert_eq!(deduplicate(&ps, &cfg).len(), 2);
        // Normalized equality: punctuation and spacing do not matter.
        let ps = vec![pair(0, "क ख।", "ग", 0), pair(1, "  क   ख ", "ग!", 0)];
        assert_eq!(deduplicate(&ps, &cfg).len(), 1);
    }

    #[test]
    fn split_one_category_is_70_20_10() {
        let s = split(&corpus(&[100]), SplitRatios::default(), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 20, 10));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let c = corpus(&[40, 30, 30]);
        let a = split(&c, SplitRatios::default(), 1).unwrap();
        let b = split(&c, SplitRatios::default(), 1).unwrap();
        assert_eq!(a, b);
        let d = split(&c, SplitRatios::default(), 2).unwrap();
        assert_ne!(a.test, d.test);
    }

    #[test]
    fn small_category_goes_to_train() {
        let c = corpus(&[95, 5]);
        let s = split(&c, SplitRatios::default(), 3).unwrap();
        let small_in_train = s.train.iter().filter(|p| p.category_id == 1).count();
        assert_eq!(small_in_train, 5);
        assert!(s.validation.iter().chain(&s.test).all(|p| p.category_id == 0));
        assert!((s.train.len() as i64 - 70).abs() <= 1);
        assert!((s.validation.len() as i64 - 20).abs() <= 1);
        assert!((s.test.len() as i64 - 10).abs() <= 1);
    }

    #[test]
    fn split_stratifies_per_category() {
        let c = corpus(&[50, 30, 20]);
        let s = split(&c, SplitRatios::default(), 11).unwrap();
        for (cat, size) in [(0usize, 50usize), (1, 30), (2, 20)] {
            let n_val = s.validation.iter().filter(|p| p.category_id == cat).count() as f64;
            let n_test = s.test.iter().filter(|p| p.category_id == cat).count() as f64;
            assert!((n_val - 0.2 * size as f64).abs() <= 1.0, "cat {cat} val {n_val}");
            assert!((n_test - 0.1 * size as f64).abs() <= 1.0, "cat {cat} test {n_test}");
        }
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split(&corpus(&[9]), SplitRatios::default(), 0),
            Err(CorpusError::TooFewPairs(9))
        ));
        let bad = SplitRatios {
            train: 0.5,
            validation: 0.2,
            test: 0.1,
        };
        assert!(matches!(split(&corpus(&[20]), bad, 0), Err(CorpusError::InvalidRatios(_))));
    }

    #[test]
    fn stats_examples() {
        let cfg = PipelineConfig::default();
        let s = stats(&[pair(0, "क ख ग", "घ", 0)], &cfg);
        assert_eq!(s.max_question_len, 3);
        assert_eq!(s.max_answer_len, 1);
        assert_eq!(s.n_pairs, 1);
        // "केटा" and "केटाहरू" merge under stemming.
        let ps = [pair(0, "केटा आयो", "हो", 0), pair(1, "केटाहरू आए", "हो", 1)];
        let s = stats(&ps, &cfg);
        assert_eq!(s.vocab_size_stemmed, s.vocab_size_raw - 1);
        assert_eq!(s.n_categories, 2);
        assert_eq!(stats(&[pair(0, "!!", "x", 0)], &cfg), CorpusStats::default());
        assert_eq!(stats(&[], &cfg), CorpusStats::default());
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(raw in prop::collection::vec((0usize..4, 0usize..3), 0..20)) {
            let cfg = PipelineConfig::default();
            let qs = ["क", "ख ।", "क!", "ग"];
            let ps: Vec<_> = raw.iter().enumerate()
                .map(|(i, (q, a))| pair(i, qs[*q], &format!("उ{a}"), 0)).collect();
            let once = deduplicate(&ps, &cfg);
            prop_assert_eq!(deduplicate(&once, &cfg), once);
        }

        #[test]
        fn split_partitions_input(sizes in prop::collection::vec(1usize..30, 1..6), seed in any::<u64>()) {
            let c = corpus(&sizes);
            prop_assume!(c.len() >= 10);
            let s = split(&c, SplitRatios::default(), seed).unwrap();
            let mut ids: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).map(|p| p.id).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..c.len()).collect::<Vec<_>>());
            // every evaluated category is covered by train
            let train_cats: HashSet<_> = s.train.iter().map(|p| p.category_id).collect();
            prop_assert!(s.validation.iter().chain(&s.test).all(|p| train_cats.contains(&p.category_id)));
        }

        #[test]
        fn stemmed_vocab_never_exceeds_raw(words in prop::collection::vec(prop::sample::select(vec!["केटा", "केटाहरू", "घरमा", "घर", "को", "आमा", "आमाको"]), 1..12)) {
            let ps: Vec<_> = words.chunks(3).enumerate()
                .map(|(i, w)| pair(i, &w.join(" "), "उत्तर", 0)).collect();
            let s = stats(&ps, &PipelineConfig::default());
            prop_assert!(s.vocab_size_stemmed <= s.vocab_size_raw);
        }
    }
}
