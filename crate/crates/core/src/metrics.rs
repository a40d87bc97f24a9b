//! Classification metrics (accuracy, micro/macro F1) and corpus-level BLEU.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold has {gold} labels but pred has {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("no samples to score")]
    Empty,
    #[error("every candidate is empty")]
    EmptyCandidate,
    #[error("max_n must be at least 1")]
    InvalidOrder,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Number of gold labels of this class.
    pub support: usize,
}

impl ClassCounts {
    fn f1(&self) -> f64 {
        f1_from(self.tp, self.fp, self.fn_)
    }
}

/// `2PR/(P+R)` in the equivalent count form `2tp/(2tp+fp+fn)`, which is
/// exact in floating point whenever the true value is representable.
fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class true positive / false positive / false negative tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: BTreeMap<usize, ClassCounts>,
}

impl ConfusionCounts {
    pub fn tally(gold: &[usize], pred: &[usize]) -> Result<Self, MetricsError> {
        check_lengths(gold, pred)?;
        let mut per_class: BTreeMap<usize, ClassCounts> = BTreeMap::new();
        for (&g, &p) in gold.iter().zip(pred) {
            per_class.entry(g).or_default().support += 1;
            if g == p {
                per_class.entry(g).or_default().tp += 1;
            } else {
                per_class.entry(p).or_default().fp += 1;
                per_class.entry(g).or_default().fn_ += 1;
            }
        }
        Ok(ConfusionCounts { per_class })
    }

    pub fn totals(&self) -> (usize, usize, usize) {
        self.per_class.values().fold((0, 0, 0), |(tp, fp, fn_), c| {
            (tp + c.tp, fp + c.fp, fn_ + c.fn_)
        })
    }
}

fn check_lengths(gold: &[usize], pred: &[usize]) -> Result<(), MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> Result<f64, MetricsError> {
    check_lengths(gold, pred)?;
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// F1 from globally pooled counts. For single-label data this equals
/// accuracy, since every error is one false positive and one false negative.
pub fn micro_f1(gold: &[usize], pred: &[usize]) -> Result<f64, MetricsError> {
    let (tp, fp, fn_) = ConfusionCounts::tally(gold, pred)?.totals();
    Ok(f1_from(tp, fp, fn_))
}

/// Unweighted mean of per-class F1 over the classes that occur in `gold`.
pub fn macro_f1(gold: &[usize], pred: &[usize]) -> Result<f64, MetricsError> {
    let counts = ConfusionCounts::tally(gold, pred)?;
    let present: Vec<f64> = counts
        .per_class
        .values()
        .filter(|c| c.support > 0)
        .map(ClassCounts::f1)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Candidates with one or more references each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuInputs {
    pub candidates: Vec<Vec<String>>,
    pub references: Vec<Vec<Vec<String>>>,
    pub max_n: usize,
}

impl BleuInputs {
    /// One reference per candidate.
    pub fn single(candidates: Vec<Vec<String>>, references: Vec<Vec<String>>, max_n: usize) -> Self {
        BleuInputs {
            candidates,
            references: references.into_iter().map(|r| vec![r]).collect(),
            max_n,
        }
    }

    /// Whitespace-split convenience constructor.
    pub fn from_text(candidates: &[&str], references: &[&str], max_n: usize) -> Self {
        let split = |s: &&str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        Self::single(
            candidates.iter().map(split).collect(),
            references.iter().map(split).collect(),
            max_n,
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-1..=max_n: clipped n-gram precisions pooled over the corpus,
/// geometric mean over orders, times the brevity penalty
/// `min(1, exp(1 - r/c))`. No smoothing; a zero precision at any order up to
/// n makes BLEU-n zero. With several references the clip count is the
/// per-reference maximum and `r` uses the reference length closest to the
/// candidate.
pub fn bleu(inputs: &BleuInputs) -> Result<BTreeMap<usize, f64>, MetricsError> {
    let BleuInputs {
        candidates,
        references,
        max_n,
    } = inputs;
    let max_n = *max_n;
    if max_n == 0 {
        return Err(MetricsError::InvalidOrder);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            gold: references.len(),
            pred: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &cand_counts {
                let clip = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
            possible[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Err(MetricsError::EmptyCandidate);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = BTreeMap::new();
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        let p = ratio(matched[n - 1], possible[n - 1]);
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        let score = if zero {
            0.0
        } else {
            bp * (log_sum / n as f64).exp()
        };
        out.insert(n, score);
    }
    Ok(out)
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

/// Serialized evaluation result shared by both backends.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_f1: Option<f64>,
    /// Keyed by n-gram order as a string, e.g. `"1"`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub bleu: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_counts: Option<ConfusionCounts>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn classification(gold: &[usize], pred: &[usize]) -> Result<Self, MetricsError> {
        Ok(EvalReport {
            accuracy: Some(accuracy(gold, pred)?),
            micro_f1: Some(micro_f1(gold, pred)?),
            macro_f1: Some(macro_f1(gold, pred)?),
            per_class_counts: Some(ConfusionCounts::tally(gold, pred)?),
            n_samples: gold.len(),
            ..Default::default()
        })
    }

    pub fn bleu_at(&self, n: usize) -> Option<f64> {
        self.bleu.get(&n.to_string()).copied()
    }
}
