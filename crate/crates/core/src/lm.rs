//! Backoff n-gram language model read from ARPA text.
//!
//! All scores are stored as natural logs; ARPA's log10 values are converted at
//! load. Unigram boosting is kept as a separate overlay so the loaded tables
//! are never modified and the same model can serve biased and unbiased decodes.

use std::collections::HashMap;
use std::sync::Arc;

use crate::biastrie::BiasTrie;
use crate::error::{Error, Result};
use crate::math::{log10_to_ln, NEG_INF};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
/// log10 probability given to `<unk>` when the ARPA file has no entry for it.
pub const MISSING_UNK_LOG10: f64 = -100.0;
pub const DEFAULT_UNIGRAM_BOOST_LOG10: f64 = -0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logp: f64,
    backoff: f64,
}

/// Word-history state: the longest suffix of the history known to the model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LmState(Vec<u32>);

impl LmState {
    pub fn words(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone)]
struct Tables {
    order: usize,
    words: Vec<String>,
    ids: HashMap<String, u32>,
    /// `grams[n - 1]` holds the n-grams.
    grams: Vec<HashMap<Vec<u32>, Entry>>,
    unk: u32,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    tables: Arc<Tables>,
    boost_overlay: HashMap<String, f64>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

impl NGramModel {
    /// Parses an ARPA file.
    pub fn from_arpa(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            Preamble,
            Data,
            Grams(usize),
            End,
        }
        let mut counts: Vec<usize> = Vec::new();
        let mut section = Section::Preamble;
        let mut words: Vec<String> = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut grams: Vec<HashMap<Vec<u32>, Entry>> = Vec::new();
        let mut section_start = 0;

        let close_section = |section: &Section,
                             grams: &Vec<HashMap<Vec<u32>, Entry>>,
                             counts: &Vec<usize>,
                             line: usize|
         -> Result<()> {
            if let Section::Grams(n) = section {
                let have = grams[n - 1].len();
                if have != counts[n - 1] {
                    return Err(parse_err(
                        line,
                        format!("{n}-gram count declared {} but found {have}", counts[n - 1]),
                    ));
                }
            }
            Ok(())
        };

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                section = Section::Data;
                continue;
            }
            if line == "\\end\\" {
                close_section(&section, &grams, &counts, lineno)?;
                section = Section::End;
                continue;
            }
            if let Some(n) = line
                .strip_prefix('\\')
                .and_then(|l| l.strip_suffix("-grams:"))
            {
                close_section(&section, &grams, &counts, lineno)?;
                let n: usize = n
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad section header {line:?}")))?;
                if n == 0 || n > counts.len() {
                    return Err(parse_err(
                        lineno,
                        format!("section {n} not declared in \\data\\"),
                    ));
                }
                if grams.len() != n - 1 {
                    return Err(parse_err(lineno, "n-gram sections out of order"));
                }
                grams.push(HashMap::with_capacity(counts[n - 1]));
                section = Section::Grams(n);
                section_start = lineno;
                continue;
            }
            match section {
                Section::Preamble | Section::End => {}
                Section::Data => {
                    let rest = line.strip_prefix("ngram ").ok_or_else(|| {
                        parse_err(lineno, format!("expected 'ngram N=count', got {line:?}"))
                    })?;
                    let (n, c) = rest
                        .split_once('=')
                        .ok_or_else(|| parse_err(lineno, "missing '='"))?;
                    let n: usize = n
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(lineno, "bad order"))?;
                    let c: usize = c
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(lineno, "bad count"))?;
                    if n != counts.len() + 1 {
                        return Err(parse_err(lineno, "ngram counts out of order"));
                    }
                    counts.push(c);
                }
                Section::Grams(n) => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != n + 1 && fields.len() != n + 2 {
                        return Err(parse_err(
                            lineno,
                            format!("malformed {n}-gram line {line:?}"),
                        ));
                    }
                    let logp: f64 = fields[0]
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad log-prob {:?}", fields[0])))?;
                    let backoff: f64 = match fields.get(n + 1) {
                        Some(b) => b
                            .parse()
                            .map_err(|_| parse_err(lineno, format!("bad backoff {b:?}")))?,
                        None => 0.0,
                    };
                    if !backoff.is_finite() {
                        return Err(parse_err(lineno, "non-finite backoff"));
                    }
                    let mut key = Vec::with_capacity(n);
                    for w in &fields[1..=n] {
                        let id = match ids.get(*w) {
                            Some(&id) => id,
                            None if n == 1 => {
                                let id = words.len() as u32;
                                words.push(w.to_string());
                                ids.insert(w.to_string(), id);
                                id
                            }
                            None => {
                                return Err(parse_err(lineno, format!("word {w:?} has no unigram")))
                            }
                        };
                        key.push(id);
                    }
                    if n > 1 && !grams[n - 2].contains_key(&key[..n - 1]) {
                        return Err(parse_err(
                            lineno,
                            format!("context of {line:?} is not an n-gram"),
                        ));
                    }
                    let entry = Entry {
                        logp: log10_to_ln(logp),
                        backoff: log10_to_ln(backoff),
                    };
                    if grams[n - 1].insert(key, entry).is_some() {
                        return Err(parse_err(lineno, format!("duplicate n-gram {line:?}")));
                    }
                    if grams[n - 1].len() > counts[n - 1] {
                        return Err(parse_err(
                            section_start,
                            format!("{n}-gram section longer than declared {}", counts[n - 1]),
                        ));
                    }
                }
            }
        }
        if section != Section::End {
            return Err(parse_err(text.lines().count(), "missing \\end\\"));
        }
        if counts.is_empty() || grams.len() != counts.len() {
            return Err(parse_err(0, "declared orders have no sections"));
        }
        let unk = match ids.get(UNK) {
            Some(&id) => id,
            None => {
                let id = words.len() as u32;
                words.push(UNK.to_string());
                ids.insert(UNK.to_string(), id);
                grams[0].insert(
                    vec![id],
                    Entry {
                        logp: log10_to_ln(MISSING_UNK_LOG10),
                        backoff: 0.0,
                    },
                );
                id
            }
        };
        // trailing orders may be declared with zero entries
        let mut order = counts.len();
        while order > 1 && counts[order - 1] == 0 {
            order -= 1;
        }
        grams.truncate(order);
        Ok(Self {
            tables: Arc::new(Tables {
                order,
                words,
                ids,
                grams,
                unk,
            }),
            boost_overlay: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.tables.order
    }

    /// Words with a unigram entry, in file order (includes `<unk>`).
    pub fn words(&self) -> &[String] {
        &self.tables.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.tables.ids.contains_key(word)
    }

    pub fn unk_id(&self) -> u32 {
        self.tables.unk
    }

    pub fn boost_overlay(&self) -> &HashMap<String, f64> {
        &self.boost_overlay
    }

    pub fn begin_state(&self) -> LmState {
        match self.tables.ids.get(BOS) {
            Some(&id) if self.tables.order > 1 => LmState(vec![id]),
            _ => LmState(Vec::new()),
        }
    }

    fn word_id(&self, word: &str) -> u32 {
        self.tables
            .ids
            .get(word)
            .copied()
            .unwrap_or(self.tables.unk)
    }

    fn base_unigram(&self, id: u32) -> f64 {
        self.tables.grams[0]
            .get(&[id][..])
            .map_or(NEG_INF, |e| e.logp)
    }

    /// Effective unigram log-probability including the boost overlay.
    pub fn unigram_score(&self, word: &str) -> f64 {
        let base = match self.tables.ids.get(word) {
            Some(&id) => self.base_unigram(id),
            None => self.base_unigram(self.tables.unk),
        };
        match self.boost_overlay.get(word) {
            Some(&b) => b.max(base),
            None => base,
        }
    }

    /// Katz backoff score of `word` after `state`, and the successor state.
    pub fn score_word(&self, state: &LmState, word: &str) -> (f64, LmState) {
        let t = &self.tables;
        let id = self.word_id(word);
        let known = t.ids.contains_key(word);
        let ctx = &state.0;
        let mut backoff = 0.0;
        let mut score = None;
        let mut key: Vec<u32> = Vec::with_capacity(ctx.len() + 1);
        for start in 0..ctx.len() {
            let n = ctx.len() - start + 1;
            if n > t.order {
                continue;
            }
            if known {
                key.clear();
                key.extend_from_slice(&ctx[start..]);
                key.push(id);
                if let Some(e) = t.grams[n - 1].get(&key) {
                    score = Some(backoff + e.logp);
                    break;
                }
            }
            if let Some(e) = t.grams[n - 2].get(&ctx[start..]) {
                backoff += e.backoff;
            }
        }
        let score = score.unwrap_or_else(|| backoff + self.unigram_score(word));
        (score, self.next_state(ctx, id))
    }

    fn next_state(&self, ctx: &[u32], id: u32) -> LmState {
        let t = &self.tables;
        let max_ctx = t.order.saturating_sub(1);
        if max_ctx == 0 {
            return LmState(Vec::new());
        }
        let mut hist: Vec<u32> = ctx.iter().copied().chain(std::iter::once(id)).collect();
        if hist.len() > max_ctx {
            hist.drain(..hist.len() - max_ctx);
        }
        while !hist.is_empty() && !t.grams[hist.len() - 1].contains_key(&hist) {
            hist.remove(0);
        }
        LmState(hist)
    }

    /// Score of ending the sentence in `state` (zero when the model has no `</s>`).
    pub fn end_score(&self, state: &LmState) -> f64 {
        if self.contains(EOS) {
            self.score_word(state, EOS).0
        } else {
            0.0
        }
    }

    /// Sum of word scores from the sentence-begin state, optionally with `</s>`.
    pub fn score_sentence<S: AsRef<str>>(&self, words: &[S], with_end: bool) -> f64 {
        let mut state = self.begin_state();
        let mut total = 0.0;
        for w in words {
            let (s, next) = self.score_word(&state, w.as_ref());
            total += s;
            state = next;
        }
        if with_end {
            total += self.end_score(&state);
        }
        total
    }

    /// Returns a model whose unigram for each listed word is at least
    /// `ln(10^boost_log10)`. Higher-order entries are untouched.
    pub fn apply_unigram_boost<S: AsRef<str>>(
        &self,
        words: &[S],
        boost_log10: f64,
    ) -> Result<Self> {
        if !(boost_log10 < 0.0) {
            return Err(Error::Config(format!(
                "unigram boost must be a negative log10 value, got {boost_log10}"
            )));
        }
        let boost = log10_to_ln(boost_log10);
        let mut out = self.clone();
        for w in words {
            let w = w.as_ref();
            let current = out.unigram_score(w);
            let oov = !self.contains(w);
            if oov || boost > current {
                let v = if oov {
                    out.boost_overlay.get(w).map_or(boost, |&b| b.max(boost))
                } else {
                    boost.max(current)
                };
                out.boost_overlay.insert(w.to_string(), v);
            }
        }
        Ok(out)
    }
}

/// Fills every trie node's smear value with the best unigram score of any
/// entity completing below it. Multi-word labels score as the sum of their
/// word unigrams.
pub fn smear(trie: &mut BiasTrie, model: &NGramModel) {
    let label_scores: Vec<f64> = trie
        .labels()
        .iter()
        .map(|l| l.split_whitespace().map(|w| model.unigram_score(w)).sum())
        .collect();
    trie.fill_smear(|label| label_scores[label]);
}
