//! Frame-synchronous CTC prefix beam search with shallow LM fusion and
//! trie-guided adaptive subword boosting.
//!
//! Each beam keeps the exact CTC path masses of its collapsed prefix split by
//! whether the last frame was blank. Fusion terms are kept beside the masses:
//!
//! * LM: `lm_weight * ln P(word | history) + word_penalty`, added when a word
//!   is completed (at the next word-start piece, or at the end).
//! * Boost: every cursor into the bias trie accumulates the boosts of the
//!   pieces it consumed. While the cursor is open its boost counts toward the
//!   beam's ranking score; when the word completes on a terminal node the
//!   boost is committed, and when the cursor falls off the trie it is dropped.
//!   Hypotheses that never complete an entity therefore end with exactly the
//!   unboosted score.

mod boost;
mod ctc;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use boost::{boost_score, boosting_scale, BoostSign};
pub use ctc::ctc_label_score;

use crate::biastrie::{BiasTrie, NodeId};
use crate::emissions::EmissionMatrix;
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, NBestList};
use crate::lm::{LmState, NGramModel};
use crate::math::{log_add_exp, NEG_INF};
use crate::vocab::{SubwordVocab, WORD_START};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoostMode {
    Off,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub top_k: usize,
    pub lm_weight: f64,
    /// Added once per emitted word.
    pub word_penalty: f64,
    /// Beams trailing the frame's best by more than this are dropped.
    pub beam_threshold: f64,
    pub boost_mode: BoostMode,
    pub boost_sign: BoostSign,
    /// Optional V x V row-major scores added when token `i` is followed by
    /// token `j` (`i` is the blank id at the start of the utterance).
    pub transition_scores: Option<Vec<f64>>,
    /// Number of hypotheses returned.
    pub nbest: usize,
    /// Add the smeared entity LM score of open trie cursors to the ranking
    /// score while a word is in progress.
    pub lm_lookahead: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 50,
            top_k: 10,
            lm_weight: 0.6,
            word_penalty: 0.0,
            beam_threshold: 30.0,
            boost_mode: BoostMode::Adaptive,
            boost_sign: BoostSign::Corrected,
            transition_scores: None,
            nbest: 10,
            lm_lookahead: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::Config(format!(
                "top_k must be in 1..={vocab_size}, got {}",
                self.top_k
            )));
        }
        if !(self.lm_weight >= 0.0) {
            return Err(Error::Config("lm_weight must be non-negative".into()));
        }
        if self.nbest == 0 {
            return Err(Error::Config("nbest must be at least 1".into()));
        }
        if let Some(t) = &self.transition_scores {
            if t.len() != vocab_size * vocab_size {
                return Err(Error::Config("transition_scores must be V x V".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cursor {
    node: NodeId,
    boost: f64,
    /// Token index where the entity match began.
    start: usize,
}

/// Entity match committed into a hypothesis: token range and label.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Span {
    start: usize,
    end: usize,
    label: u32,
    boost: f64,
}

#[derive(Debug, Clone)]
struct Beam {
    prefix: Vec<u32>,
    p_blank: f64,
    p_nonblank: f64,
    lm_state: LmState,
    /// Weighted LM scores and word penalties of completed words.
    fusion: f64,
    committed: f64,
    cursors: Vec<Cursor>,
    spans: Vec<Span>,
    /// Token index where the word in progress began.
    word_start: usize,
    frames: Vec<(usize, usize)>,
    score: f64,
}

impl Beam {
    fn acoustic(&self) -> f64 {
        log_add_exp(self.p_blank, self.p_nonblank)
    }

    /// Best boost an open cursor would add on completion, net of the
    /// committed spans it would replace.
    fn pending(&self) -> f64 {
        self.cursors
            .iter()
            .map(|c| {
                let replaced: f64 = self
                    .spans
                    .iter()
                    .filter(|s| s.start >= c.start)
                    .map(|s| s.boost)
                    .sum();
                c.boost - replaced
            })
            .fold(None, |acc: Option<f64>, b| {
                Some(acc.map_or(b, |a| a.max(b)))
            })
            .unwrap_or(0.0)
    }

    fn boost_total(&self) -> f64 {
        self.committed + self.pending()
    }
}

fn rank_order(a: &Beam, b: &Beam) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.prefix.len().cmp(&b.prefix.len()))
        .then_with(|| a.prefix.cmp(&b.prefix))
}

/// Reusable decoder over shared, immutable resources.
pub struct Decoder<'a> {
    vocab: &'a SubwordVocab,
    lm: Option<&'a NGramModel>,
    trie: Option<&'a BiasTrie>,
    config: DecodeConfig,
}

struct Candidate {
    id: u32,
    rank: usize,
    logp: f64,
}

impl<'a> Decoder<'a> {
    pub fn new(
        vocab: &'a SubwordVocab,
        lm: Option<&'a NGramModel>,
        trie: Option<&'a BiasTrie>,
        config: DecodeConfig,
    ) -> Result<Self> {
        config.validate(vocab.len())?;
        Ok(Self {
            vocab,
            lm,
            trie,
            config,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    fn boosting(&self) -> Option<&'a BiasTrie> {
        match self.config.boost_mode {
            BoostMode::Off => None,
            BoostMode::Adaptive => self.trie,
        }
    }

    pub fn decode(&self, emissions: &EmissionMatrix) -> Result<NBestList> {
        if emissions.vocab_size() != self.vocab.len() {
            return Err(Error::Shape(format!(
                "emissions have {} columns but the vocabulary has {} pieces",
                emissions.vocab_size(),
                self.vocab.len()
            )));
        }
        if emissions.frames() == 0 {
            return Ok(vec![Hypothesis::empty()]);
        }
        let blank = self.vocab.blank_id();
        let mut beams = vec![Beam {
            prefix: Vec::new(),
            p_blank: 0.0,
            p_nonblank: NEG_INF,
            lm_state: self.lm.map(NGramModel::begin_state).unwrap_or_default(),
            fusion: 0.0,
            committed: 0.0,
            cursors: Vec::new(),
            spans: Vec::new(),
            word_start: 0,
            frames: Vec::new(),
            score: 0.0,
        }];

        let mut order: Vec<u32> = (0..self.vocab.len() as u32).collect();
        for t in 0..emissions.frames() {
            let row = emissions.row(t);
            order.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
            let best = row[order[0] as usize] as f64;
            let candidates: Vec<Candidate> = order[..self.config.top_k]
                .iter()
                .enumerate()
                .filter(|&(_, &id)| id != blank)
                .map(|(i, &id)| Candidate {
                    id,
                    rank: i + 1,
                    logp: row[id as usize] as f64,
                })
                .collect();
            beams = self.step(t, &beams, emissions, &candidates, best);
        }

        let mut finals: Vec<Beam> = beams.into_iter().map(|b| self.finalize(b)).collect();
        finals.sort_by(rank_order);
        finals.truncate(self.config.nbest);
        finals.into_iter().map(|b| self.to_hypothesis(b)).collect()
    }

    fn step(
        &self,
        t: usize,
        beams: &[Beam],
        emissions: &EmissionMatrix,
        candidates: &[Candidate],
        best: f64,
    ) -> Vec<Beam> {
        let blank = self.vocab.blank_id();
        let blank_logp = emissions.get(t, blank as usize);
        let mut next: Vec<Beam> = Vec::with_capacity(beams.len() * (candidates.len() + 1));
        // per next beam: the largest single contribution seen, used to pick frame spans
        let mut best_contrib: Vec<f64> = Vec::with_capacity(next.capacity());
        let mut index: HashMap<Vec<u32>, usize> = HashMap::with_capacity(next.capacity());

        // same-prefix continuations first so extensions merge into them
        for beam in beams {
            let total = beam.acoustic();
            let via_blank = total + blank_logp;
            let mut b = beam.clone();
            b.p_blank = via_blank;
            b.p_nonblank = NEG_INF;
            let mut contrib = via_blank;
            if let Some(&last) = beam.prefix.last() {
                let stay = beam.p_nonblank + emissions.get(t, last as usize);
                b.p_nonblank = stay;
                if stay > contrib {
                    contrib = stay;
                    b.frames.last_mut().unwrap().1 = t;
                }
            }
            index.insert(b.prefix.clone(), next.len());
            next.push(b);
            best_contrib.push(contrib);
        }

        for beam in beams {
            let last = beam.prefix.last().copied();
            for cand in candidates {
                let source = if Some(cand.id) == last {
                    beam.p_blank
                } else {
                    beam.acoustic()
                };
                if source == NEG_INF {
                    continue;
                }
                let transition = self.transition(last.unwrap_or(blank), cand.id);
                let mass = source + cand.logp + transition;
                let mut prefix = beam.prefix.clone();
                prefix.push(cand.id);
                match index.get(&prefix) {
                    Some(&i) => {
                        let existing = &mut next[i];
                        existing.p_nonblank = log_add_exp(existing.p_nonblank, mass);
                        let ext = self.extend(beam, cand, best, t);
                        if ext.boost_total() > existing.boost_total() {
                            existing.cursors = ext.cursors;
                            existing.committed = ext.committed;
                        }
                        if mass > best_contrib[i] {
                            best_contrib[i] = mass;
                            existing.frames = ext.frames;
                        }
                    }
                    None => {
                        let mut ext = self.extend(beam, cand, best, t);
                        ext.p_blank = NEG_INF;
                        ext.p_nonblank = mass;
                        index.insert(prefix, next.len());
                        next.push(ext);
                        best_contrib.push(mass);
                    }
                }
            }
        }

        for b in &mut next {
            b.score = self.ranking_score(b);
        }
        next.retain(|b| b.score > NEG_INF);
        next.sort_by(rank_order);
        if let Some(top) = next.first().map(|b| b.score) {
            let floor = top - self.config.beam_threshold;
            next.retain(|b| b.score >= floor);
        }
        next.truncate(self.config.beam_size);
        next
    }

    fn transition(&self, from: u32, to: u32) -> f64 {
        match &self.config.transition_scores {
            Some(t) => t[from as usize * self.vocab.len() + to as usize],
            None => 0.0,
        }
    }

    fn ranking_score(&self, b: &Beam) -> f64 {
        let mut s = b.acoustic() + b.fusion + b.boost_total();
        if self.config.lm_lookahead {
            if let (Some(trie), Some(_)) = (self.boosting(), self.lm) {
                let look = b
                    .cursors
                    .iter()
                    .filter(|c| c.start == b.word_start)
                    .map(|c| trie.smear(c.node))
                    .fold(NEG_INF, f64::max);
                if look > NEG_INF {
                    s += self.config.lm_weight * look;
                }
            }
        }
        s
    }

    /// Non-acoustic state of `beam` extended by `cand` at frame `t`.
    fn extend(&self, beam: &Beam, cand: &Candidate, best: f64, t: usize) -> Beam {
        let mut b = Beam {
            prefix: Vec::new(),
            p_blank: NEG_INF,
            p_nonblank: NEG_INF,
            lm_state: beam.lm_state.clone(),
            fusion: beam.fusion,
            committed: beam.committed,
            cursors: beam.cursors.clone(),
            spans: beam.spans.clone(),
            word_start: beam.word_start,
            frames: beam.frames.clone(),
            score: 0.0,
        };
        let starts_word = self.vocab.is_word_start(cand.id);
        if starts_word && !beam.prefix.is_empty() {
            self.complete_word(&mut b, &beam.prefix);
            b.word_start = beam.prefix.len();
        }
        if let Some(trie) = self.boosting() {
            let advanced: Vec<Cursor> = b
                .cursors
                .iter()
                .filter_map(|c| {
                    trie.advance(c.node, cand.id).map(|(node, _)| Cursor {
                        node,
                        boost: c.boost,
                        start: c.start,
                    })
                })
                .collect();
            let opened = if starts_word {
                trie.advance(BiasTrie::ROOT, cand.id)
                    .map(|(node, _)| Cursor {
                        node,
                        boost: 0.0,
                        start: beam.prefix.len(),
                    })
            } else {
                None
            };
            let h = if advanced.is_empty() && opened.is_none() {
                0.0
            } else {
                boost_score(cand.rank, best - cand.logp, self.config.boost_sign)
            };
            let mut cursors: Vec<Cursor> = advanced.into_iter().chain(opened).collect();
            for c in &mut cursors {
                c.boost += h;
            }
            cursors.sort_by(|a, b| {
                a.node
                    .cmp(&b.node)
                    .then(b.boost.total_cmp(&a.boost))
                    .then(a.start.cmp(&b.start))
            });
            cursors.dedup_by_key(|c| c.node);
            b.cursors = cursors;
        }
        b.frames.push((t, t));
        b.prefix = beam.prefix.clone();
        b.prefix.push(cand.id);
        b
    }

    /// Handles the end of the word spanning `prefix[b.word_start..]`: commits a
    /// completed entity and applies LM fusion.
    fn complete_word(&self, b: &mut Beam, prefix: &[u32]) {
        let end = prefix.len();
        let mut single_word_label = None;
        if let Some(trie) = self.boosting() {
            // the longest completed entity wins
            let done = b
                .cursors
                .iter()
                .filter_map(|c| trie.terminal(c.node).map(|l| (c.start, c.boost, l)))
                .min_by(|x, y| x.0.cmp(&y.0).then(y.1.total_cmp(&x.1)));
            if let Some((start, boost, label)) = done {
                // a longer match replaces the shorter ones it contains
                let replaced: f64 = b
                    .spans
                    .iter()
                    .filter(|s| s.start >= start)
                    .map(|s| s.boost)
                    .sum();
                b.spans.retain(|s| s.start < start);
                b.committed += boost - replaced;
                b.spans.push(Span {
                    start,
                    end,
                    label,
                    boost,
                });
                if start == b.word_start {
                    single_word_label = Some(trie.label(label).to_string());
                }
            }
        }
        let surface;
        let words: Vec<&str> = match &single_word_label {
            Some(label) => label.split_whitespace().collect(),
            None => {
                surface = self.surface_word(&prefix[b.word_start..end]);
                vec![surface.as_str()]
            }
        };
        for w in words {
            if let Some(lm) = self.lm {
                let (s, next) = lm.score_word(&b.lm_state, w);
                b.fusion += self.config.lm_weight * s;
                b.lm_state = next;
            }
            b.fusion += self.config.word_penalty;
        }
    }

    fn surface_word(&self, pieces: &[u32]) -> String {
        let mut w = String::new();
        for &p in pieces {
            let piece = self.vocab.piece(p);
            w.push_str(piece.strip_prefix(WORD_START).unwrap_or(piece));
        }
        w
    }

    fn finalize(&self, mut b: Beam) -> Beam {
        if !b.prefix.is_empty() {
            let prefix = std::mem::take(&mut b.prefix);
            self.complete_word(&mut b, &prefix);
            b.prefix = prefix;
        }
        if let Some(lm) = self.lm {
            b.fusion += self.config.lm_weight * lm.end_score(&b.lm_state);
        }
        b.cursors.clear();
        b.score = b.acoustic() + b.fusion + b.committed;
        b
    }

    fn to_hypothesis(&self, b: Beam) -> Result<Hypothesis> {
        let words = self.words_with_labels(&b)?;
        Ok(Hypothesis {
            words,
            pieces: b.prefix,
            ctc_score: b.score,
            token_frames: b.frames,
            ..Hypothesis::empty()
        })
    }

    /// Detokenizes, replacing committed entity spans by their canonical label.
    fn words_with_labels(&self, b: &Beam) -> Result<Vec<String>> {
        let mut words = Vec::new();
        let mut i = 0;
        let mut spans = b.spans.iter().peekable();
        while i < b.prefix.len() {
            if let (Some(span), Some(trie)) = (spans.peek(), self.trie) {
                if span.start == i {
                    words.extend(trie.label(span.label).split_whitespace().map(String::from));
                    i = span.end;
                    spans.next();
                    continue;
                }
            }
            let mut j = i + 1;
            while j < b.prefix.len() && !self.vocab.is_word_start(b.prefix[j]) {
                j += 1;
            }
            words.push(self.surface_word(&b.prefix[i..j]));
            i = j;
        }
        Ok(words)
    }
}

/// Decodes with a one-off [`Decoder`].
pub fn decode(
    emissions: &EmissionMatrix,
    vocab: &SubwordVocab,
    lm: Option<&NGramModel>,
    trie: Option<&BiasTrie>,
    config: &DecodeConfig,
) -> Result<NBestList> {
    Decoder::new(vocab, lm, trie, config.clone())?.decode(emissions)
}
