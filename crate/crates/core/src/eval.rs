//! Word error rate and rare/OOV entity precision, recall and F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RARE_THRESHOLD: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rarity {
    Common,
    Rare,
    Oov,
}

/// Training-corpus word counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RarityTable {
    counts: HashMap<String, u64>,
    pub rare_threshold: u64,
}

impl RarityTable {
    pub fn new(counts: HashMap<String, u64>, rare_threshold: u64) -> Self {
        Self {
            counts,
            rare_threshold,
        }
    }

    /// Counts words in training transcripts.
    pub fn from_transcripts<S: AsRef<str>>(lines: &[S], rare_threshold: u64) -> Self {
        let mut counts = HashMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        Self::new(counts, rare_threshold)
    }

    /// Parses `word count` lines.
    pub fn parse(text: &str, rare_threshold: u64) -> Result<Self> {
        let mut counts = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                [w, c] => {
                    let c = c.parse::<u64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: format!("bad count {c:?}: {e}"),
                    })?;
                    counts.insert(w.to_string(), c);
                }
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "expected `word count`".into(),
                    })
                }
            }
        }
        Ok(Self::new(counts, rare_threshold))
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<_> = self.counts.iter().collect();
        rows.sort();
        rows.iter().map(|(w, c)| format!("{w} {c}\n")).collect()
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.counts.get(word).copied()
    }
}

pub fn classify_rarity(word: &str, table: &RarityTable) -> Rarity {
    match table.count(word) {
        None => Rarity::Oov,
        Some(c) if c < table.rare_threshold => Rarity::Rare,
        Some(_) => Rarity::Common,
    }
}

/// One step of a word alignment, by position in the reference / hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match(usize, usize),
    Sub(usize, usize),
    Del(usize),
    Ins(usize),
}

/// Levenshtein alignment with unit costs. When tracing back, equal-cost
/// options resolve to the diagonal first, then deletion, then insertion.
pub fn align_words<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hypothesis: &[T],
) -> Vec<AlignOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    let same = |i: usize, j: usize| reference[i].as_ref() == hypothesis[j].as_ref();
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(!same(i - 1, j - 1));
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let eq = same(i - 1, j - 1);
            if d[i][j] == d[i - 1][j - 1] + usize::from(!eq) {
                ops.push(if eq {
                    AlignOp::Match(i - 1, j - 1)
                } else {
                    AlignOp::Sub(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Del(i - 1));
            i -= 1;
        } else {
            ops.push(AlignOp::Ins(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl ErrorCounts {
    pub fn from_alignment(ops: &[AlignOp], reference_words: usize) -> Self {
        let mut c = Self {
            reference_words,
            ..Self::default()
        };
        for op in ops {
            match op {
                AlignOp::Sub(..) => c.substitutions += 1,
                AlignOp::Del(_) => c.deletions += 1,
                AlignOp::Ins(_) => c.insertions += 1,
                AlignOp::Match(..) => {}
            }
        }
        c
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`. An empty reference gives 0 when nothing was
    /// inserted and infinity otherwise.
    pub fn rate(&self) -> f64 {
        if self.reference_words == 0 {
            return if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            };
        }
        self.errors() as f64 / self.reference_words as f64
    }

    pub fn add(&mut self, other: &Self) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_words += other.reference_words;
    }
}

pub fn wer<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> f64 {
    ErrorCounts::from_alignment(&align_words(reference, hypothesis), reference.len()).rate()
}

/// Relative WER reduction in percent.
pub fn werr(baseline: f64, system: f64) -> f64 {
    (baseline - system) / baseline * 100.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    /// `None` when the hypotheses contain no word of the category.
    pub precision: Option<f64>,
    /// `None` when the references contain no word of the category.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub hits: usize,
    pub reference_count: usize,
    pub hypothesis_count: usize,
}

impl EntityScores {
    fn from_counts(hits: usize, reference_count: usize, hypothesis_count: usize) -> Self {
        let precision = (hypothesis_count > 0).then(|| hits as f64 / hypothesis_count as f64);
        let recall = (reference_count > 0).then(|| hits as f64 / reference_count as f64);
        let f1 = recall.map(|r| {
            let p = precision.unwrap_or(0.0);
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        });
        Self {
            precision,
            recall,
            f1,
            hits,
            reference_count,
            hypothesis_count,
        }
    }
}

/// Token-level entity scores for one category. A reference occurrence is a
/// hit when the word alignment pairs it with an identical hypothesis word.
pub fn entity_prf<S: AsRef<str>>(
    pairs: &[(Vec<S>, Vec<S>)],
    table: &RarityTable,
    category: Rarity,
) -> EntityScores {
    let (mut hits, mut n_ref, mut n_hyp) = (0, 0, 0);
    for (r, h) in pairs {
        let in_cat = |w: &S| classify_rarity(w.as_ref(), table) == category;
        n_ref += r.iter().filter(|w| in_cat(w)).count();
        n_hyp += h.iter().filter(|w| in_cat(w)).count();
        hits += align_words(r, h)
            .iter()
            .filter(|op| matches!(op, AlignOp::Match(i, _) if in_cat(&r[*i])))
            .count();
    }
    EntityScores::from_counts(hits, n_ref, n_hyp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub wer: f64,
    pub errors: ErrorCounts,
    pub rare: EntityScores,
    pub oov: EntityScores,
}

/// Scores paired reference / hypothesis word sequences.
pub fn evaluate<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)], table: &RarityTable) -> EvalReport {
    let mut errors = ErrorCounts::default();
    for (r, h) in pairs {
        errors.add(&ErrorCounts::from_alignment(&align_words(r, h), r.len()));
    }
    EvalReport {
        utterances: pairs.len(),
        wer: errors.rate(),
        errors,
        rare: entity_prf(pairs, table, Rarity::Rare),
        oov: entity_prf(pairs, table, Rarity::Oov),
    }
}
