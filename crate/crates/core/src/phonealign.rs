//! Phone-level forced alignment of hypotheses against frame posteriors.
//!
//! Each hypothesis is expanded to a phone string (one silence between words)
//! and aligned to the full-rate posterior frames by dynamic time warping. The
//! alignment cost reranks the N-best list, and the per-word frame spans it
//! yields drive a lexicon lookup that can swap a misrecognized word for a
//! catalog entity with the same pronunciation.

use serde::{Deserialize, Serialize};

use crate::catalog::EntityCatalog;
use crate::decoder::ctc_label_score;
use crate::emissions::{EmissionMatrix, PhonePosteriorMatrix};
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, NBestList};
use crate::phones::{Lexicon, PhoneSet};
use crate::tokenizer::segment_phrase;
use crate::vocab::SubwordVocab;

pub const DEFAULT_DTW_SCALE: f64 = 0.1;
pub const DEFAULT_SMOOTH_WINDOW: usize = 3;

/// Phone string for a hypothesis. `word_index[j]` is the hypothesis word that
/// produced phone `j`, or `None` for a separating silence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneSequence {
    pub phones: Vec<u32>,
    pub word_index: Vec<Option<usize>>,
    /// One flag per hypothesis word: true when its phones came from the
    /// letter fallback rather than the lexicon.
    pub fallback: Vec<bool>,
}

impl PhoneSequence {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub cost: f64,
    /// Zero-based (frame, label position) pairs from (0, 0) to (T-1, L-1).
    pub path: Vec<(usize, usize)>,
}

fn letter_fallback(word: &str, phones: &PhoneSet) -> Vec<u32> {
    word.chars()
        .filter_map(|c| phones.id(&c.to_string()))
        .collect()
}

/// Builds the phone string for `words`, using the first pronunciation listed
/// in the lexicon. Words the lexicon lacks are spelled letter by letter with
/// same-named phones; letters without such a phone are dropped. A word that
/// yields no phones at all is left out of the sequence.
pub fn hyp_to_phones<S: AsRef<str>>(
    words: &[S],
    lexicon: &Lexicon,
    phones: &PhoneSet,
) -> Result<PhoneSequence> {
    let sil = phones.silence_id();
    let mut seq = PhoneSequence {
        phones: Vec::new(),
        word_index: Vec::new(),
        fallback: Vec::with_capacity(words.len()),
    };
    for (w, word) in words.iter().enumerate() {
        let word = word.as_ref().to_lowercase();
        let (pron, fallback) = match lexicon.pronunciations(&word).and_then(|p| p.first()) {
            Some(p) => (p.clone(), false),
            None => (letter_fallback(&word, phones), true),
        };
        seq.fallback.push(fallback);
        if pron.is_empty() {
            continue;
        }
        if !seq.phones.is_empty() {
            seq.phones.push(sil);
            seq.word_index.push(None);
        }
        seq.word_index
            .extend(std::iter::repeat_n(Some(w), pron.len()));
        seq.phones.extend(pron);
    }
    if seq.phones.is_empty() {
        return Err(Error::NoPhones);
    }
    Ok(seq)
}

/// Euclidean distance between a posterior row and the one-hot vector of `phone`.
pub fn onehot_distance(row: &[f32], phone: u32) -> f64 {
    row.iter()
        .enumerate()
        .map(|(k, &x)| {
            let target = if k == phone as usize { 1.0 } else { 0.0 };
            let d = x as f64 - target;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimal-cost monotone alignment of posterior frames to `labels`.
///
/// `D(i, j) = d(i, j) + min(D(i-1, j-1), D(i-1, j), D(i, j-1))`; on equal
/// costs the diagonal predecessor is preferred, then the vertical, then the
/// horizontal.
pub fn dtw_align(posteriors: &PhonePosteriorMatrix, labels: &[u32]) -> Result<AlignmentResult> {
    let (t_max, l_max) = (posteriors.frames(), labels.len());
    if t_max == 0 || l_max == 0 {
        return Err(Error::Shape(format!(
            "alignment needs at least one frame and one label, got {t_max} and {l_max}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&p| p as usize >= posteriors.phones()) {
        return Err(Error::LabelOutOfRange {
            id: bad as usize,
            vocab: posteriors.phones(),
        });
    }
    let mut cost = vec![f64::INFINITY; t_max * l_max];
    let at = |i: usize, j: usize| i * l_max + j;
    for i in 0..t_max {
        let row = posteriors.row(i);
        for j in 0..l_max {
            let d = onehot_distance(row, labels[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                predecessors(i, j)
                    .map(|(pi, pj)| cost[at(pi, pj)])
                    .fold(f64::INFINITY, f64::min)
            };
            cost[at(i, j)] = d + best;
        }
    }
    let mut path = vec![(t_max - 1, l_max - 1)];
    let (mut i, mut j) = (t_max - 1, l_max - 1);
    while (i, j) != (0, 0) {
        let mut choice = None;
        for (pi, pj) in predecessors(i, j) {
            let c = cost[at(pi, pj)];
            if choice.is_none_or(|(_, best)| c < best) {
                choice = Some(((pi, pj), c));
            }
        }
        (i, j) = choice.expect("interior cells have a predecessor").0;
        path.push((i, j));
    }
    path.reverse();
    Ok(AlignmentResult {
        cost: cost[at(t_max - 1, l_max - 1)],
        path,
    })
}

/// Valid predecessors in preference order.
fn predecessors(i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
    let diag = (i > 0 && j > 0).then(|| (i - 1, j - 1));
    let up = (i > 0).then(|| (i - 1, j));
    let left = (j > 0).then(|| (i, j - 1));
    [diag, up, left].into_iter().flatten()
}

/// Half-open frame spans for each of `n_words` words, read off the path.
///
/// A frame aligned to phones of two different words (possible when the path
/// moves horizontally) goes to the earlier word. Words absent from the phone
/// string, or whose frames were all claimed earlier, get an empty span at the
/// end of the preceding word.
pub fn word_boundaries(
    path: &[(usize, usize)],
    seq: &PhoneSequence,
    n_words: usize,
) -> Vec<(usize, usize)> {
    let mut spans: Vec<Option<(usize, usize)>> = vec![None; n_words];
    let mut claimed_until = 0usize;
    for &(i, j) in path {
        let Some(w) = seq.word_index[j] else { continue };
        match &mut spans[w] {
            Some((_, end)) => *end = (*end).max(i + 1),
            slot @ None => {
                if i >= claimed_until {
                    *slot = Some((i, i + 1));
                } else if i + 1 > claimed_until {
                    *slot = Some((claimed_until, i + 1));
                }
            }
        }
        if let Some((_, end)) = spans[w] {
            claimed_until = claimed_until.max(end);
        }
    }
    let mut out = Vec::with_capacity(n_words);
    let mut prev_end = 0;
    for span in spans {
        let s = span.unwrap_or((prev_end, prev_end));
        prev_end = s.1;
        out.push(s);
    }
    out
}

/// How the alignment cost enters the rescoring objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtwSign {
    /// `ln P_CTC - scale * D`: well-aligned hypotheses score higher.
    #[default]
    Subtract,
    /// `ln P_CTC + scale * D`, as the formula is printed.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescoreConfig {
    pub dtw_scale: f64,
    pub sign: DtwSign,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        Self {
            dtw_scale: DEFAULT_DTW_SCALE,
            sign: DtwSign::Subtract,
        }
    }
}

/// Resources shared by rescoring and lexicon correction.
#[derive(Debug, Clone, Copy)]
pub struct PhoneContext<'a> {
    pub lexicon: &'a Lexicon,
    pub phones: &'a PhoneSet,
    pub vocab: &'a SubwordVocab,
}

/// Attaches `rescore`, `dtw_cost` and `word_boundaries` to every hypothesis
/// and stably sorts the list by descending rescore.
///
/// The CTC term is the exact forward probability of the hypothesis' pieces;
/// hypotheses read back without pieces are re-segmented greedily. A
/// hypothesis with no mappable phones is aligned as a single silence.
pub fn rescore_nbest(
    nbest: &[Hypothesis],
    emissions: &EmissionMatrix,
    posteriors: &PhonePosteriorMatrix,
    ctx: PhoneContext<'_>,
    config: RescoreConfig,
) -> Result<NBestList> {
    if emissions.vocab_size() != ctx.vocab.len() {
        return Err(Error::Shape(format!(
            "emissions have {} columns, vocabulary has {} entries",
            emissions.vocab_size(),
            ctx.vocab.len()
        )));
    }
    let mut out = Vec::with_capacity(nbest.len());
    for hyp in nbest {
        let mut h = hyp.clone();
        let pieces = if h.pieces.is_empty() && !h.words.is_empty() {
            segment_phrase(&h.text(), ctx.vocab)?
        } else {
            h.pieces.clone()
        };
        let p_ctc = ctc_label_score(emissions, ctx.vocab.blank_id(), &pieces)?;
        let seq = match hyp_to_phones(&h.words, ctx.lexicon, ctx.phones) {
            Ok(seq) => seq,
            Err(Error::NoPhones) => PhoneSequence {
                phones: vec![ctx.phones.silence_id()],
                word_index: vec![None],
                fallback: vec![true; h.words.len()],
            },
            Err(e) => return Err(e),
        };
        let aligned = dtw_align(posteriors, &seq.phones)?;
        let dtw = config.dtw_scale * aligned.cost;
        h.rescore = Some(match config.sign {
            DtwSign::Subtract => p_ctc - dtw,
            DtwSign::PaperLiteral => p_ctc + dtw,
        });
        h.dtw_cost = Some(aligned.cost);
        h.word_boundaries = Some(word_boundaries(&aligned.path, &seq, h.words.len()));
        out.push(h);
    }
    out.sort_by(|a, b| b.rescore.unwrap().total_cmp(&a.rescore.unwrap()));
    Ok(out)
}

/// Per-frame argmax over `start..end`; ties go to the lower phone id.
pub fn frame_phone_predictions(
    posteriors: &PhonePosteriorMatrix,
    start: usize,
    end: usize,
) -> Result<Vec<u32>> {
    if start > end || end > posteriors.frames() {
        return Err(Error::Shape(format!(
            "span {start}..{end} outside {} frames",
            posteriors.frames()
        )));
    }
    Ok((start..end)
        .map(|t| {
            let row = posteriors.row(t);
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

/// Majority vote in a centred window, truncated at the edges, with ties
/// keeping the original value. Passes repeat until nothing changes, so the
/// result is stable under further smoothing.
pub fn smooth(seq: &[u32], window: usize) -> Vec<u32> {
    assert!(window % 2 == 1, "smoothing window must be odd");
    let mut cur = seq.to_vec();
    loop {
        let next = majority_pass(&cur, window / 2);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn majority_pass(seq: &[u32], half: usize) -> Vec<u32> {
    (0..seq.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(seq.len());
            let win = &seq[lo..hi];
            let count = |v: u32| win.iter().filter(|&&x| x == v).count();
            let own = count(seq[i]);
            let mut best = (own, seq[i]);
            for &v in win {
                let c = count(v);
                if c > best.0 {
                    best = (c, v);
                }
            }
            best.1
        })
        .collect()
}

pub fn collapse(seq: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(seq.len());
    for &x in seq {
        if out.last() != Some(&x) {
            out.push(x);
        }
    }
    out
}

/// Phone strings under which `entity` may be recognized: its own lexicon
/// entries, or for a multi-word entity the first pronunciations of its
/// words joined by silence.
fn entity_pronunciations(entity: &str, lexicon: &Lexicon, sil: u32) -> Vec<Vec<u32>> {
    if let Some(p) = lexicon.pronunciations(entity) {
        return p.to_vec();
    }
    let words: Vec<&str> = entity.split(' ').collect();
    if words.len() < 2 {
        return Vec::new();
    }
    let mut joined = Vec::new();
    for (k, w) in words.iter().enumerate() {
        let Some(p) = lexicon.pronunciations(w).and_then(|p| p.first()) else {
            return Vec::new();
        };
        if k > 0 {
            joined.push(sil);
        }
        joined.extend(p);
    }
    vec![joined]
}

/// Replaces 1-best words whose frames decode to a catalog entity's
/// pronunciation. Needs `word_boundaries` from rescoring; without them the
/// hypothesis is returned unchanged.
pub fn lexicon_lookup_replace(
    one_best: &Hypothesis,
    posteriors: &PhonePosteriorMatrix,
    catalog: &EntityCatalog,
    lexicon: &Lexicon,
    phones: &PhoneSet,
    window: usize,
) -> Result<Hypothesis> {
    let Some(bounds) = &one_best.word_boundaries else {
        return Ok(one_best.clone());
    };
    if bounds.len() != one_best.words.len() {
        return Err(Error::Shape(format!(
            "{} word boundaries for {} words",
            bounds.len(),
            one_best.words.len()
        )));
    }
    let sil = phones.silence_id();
    let candidates: Vec<(Vec<&str>, Vec<Vec<u32>>)> = catalog
        .entities()
        .iter()
        .map(|e| {
            (
                e.split(' ').collect(),
                entity_pronunciations(e, lexicon, sil),
            )
        })
        .collect();

    let mut out = one_best.clone();
    out.words.clear();
    let mut new_bounds = Vec::with_capacity(bounds.len());
    for (word, &(start, end)) in one_best.words.iter().zip(bounds) {
        let replacement = (|| -> Result<Option<&Vec<&str>>> {
            if start >= end {
                return Ok(None);
            }
            let preds = frame_phone_predictions(posteriors, start, end)?;
            let mut derived = collapse(&smooth(&preds, window));
            while derived.first() == Some(&sil) {
                derived.remove(0);
            }
            while derived.last() == Some(&sil) {
                derived.pop();
            }
            if derived.is_empty() {
                return Ok(None);
            }
            let own = lexicon.pronunciations(&word.to_lowercase());
            if own.is_some_and(|p| p.contains(&derived)) {
                return Ok(None);
            }
            Ok(candidates
                .iter()
                .find(|(_, prons)| prons.contains(&derived))
                .map(|(words, _)| words)
                .filter(|words| !(words.len() == 1 && words[0] == word)))
        })()?;
        match replacement {
            Some(words) => {
                for w in words {
                    out.words.push(w.to_string());
                    new_bounds.push((start, end));
                }
            }
            None => {
                out.words.push(word.clone());
                new_bounds.push((start, end));
            }
        }
    }
    out.word_boundaries = Some(new_bounds);
    Ok(out)
}
