//! Word to subword segmentation over a fixed vocabulary.
//!
//! Besides the deterministic greedy segmentation, all alternative parses of a
//! word can be enumerated in a stable order (fewest pieces first, then
//! lexicographic piece ids). The bias trie uses these alternatives to catch
//! entities that the acoustic model spells with non-canonical pieces.

use crate::error::{Error, Result};
use crate::vocab::{SubwordVocab, WORD_START};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segmentation {
    pub word: String,
    pub piece_ids: Vec<u32>,
}

/// Result of joining pieces back into words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Detokenized {
    pub words: Vec<String>,
    /// Set when the sequence started with a piece lacking the word-start marker.
    pub leading_continuation: bool,
}

/// Parse graph for one word. State 0 is "nothing consumed"; state `i + 1` means
/// the marker and the first `i` characters have been consumed.
struct ParseGraph {
    edges: Vec<Vec<(u32, usize)>>,
    goal: usize,
}

impl ParseGraph {
    fn new(word: &str, vocab: &SubwordVocab) -> Self {
        let chars: Vec<char> = word.chars().collect();
        let n = chars.len();
        let mut edges = vec![Vec::new(); n + 2];
        let mut buf = String::new();

        buf.push(WORD_START);
        if let Some(id) = vocab.id(&buf) {
            edges[0].push((id, 1));
        }
        for j in 1..=n {
            buf.push(chars[j - 1]);
            if let Some(id) = vocab.id(&buf) {
                edges[0].push((id, j + 1));
            }
        }
        for i in 0..n {
            buf.clear();
            for j in i + 1..=n {
                buf.push(chars[j - 1]);
                if let Some(id) = vocab.id(&buf) {
                    if !vocab.is_word_start(id) && id != vocab.blank_id() {
                        edges[i + 1].push((id, j + 1));
                    }
                }
            }
        }
        for e in &mut edges {
            e.sort_unstable();
        }
        Self { edges, goal: n + 1 }
    }

    /// `feasible[s][c]`: the goal is reachable from `s` with exactly `c` pieces.
    fn feasibility(&self) -> Vec<Vec<bool>> {
        let states = self.edges.len();
        let max_pieces = states;
        let mut feasible = vec![vec![false; max_pieces + 1]; states];
        feasible[self.goal][0] = true;
        // edges only move forward, so a reverse sweep is a topological order
        for s in (0..states).rev() {
            if s == self.goal {
                continue;
            }
            for &(_, next) in &self.edges[s] {
                for c in 0..max_pieces {
                    if feasible[next][c] {
                        feasible[s][c + 1] = true;
                    }
                }
            }
        }
        feasible
    }
}

fn check_word(word: &str) -> Result<()> {
    if word.is_empty() || word.contains(char::is_whitespace) {
        return Err(Error::Unsegmentable(word.to_string()));
    }
    Ok(())
}

/// Left-to-right maximal munch.
pub fn segment_greedy(word: &str, vocab: &SubwordVocab) -> Result<Segmentation> {
    check_word(word)?;
    let graph = ParseGraph::new(word, vocab);
    let mut state = 0;
    let mut piece_ids = Vec::new();
    while state != graph.goal {
        // longest piece = furthest next state
        let &(id, next) = graph.edges[state]
            .iter()
            .max_by_key(|&&(_, next)| next)
            .ok_or_else(|| Error::Unsegmentable(word.to_string()))?;
        if next == state {
            return Err(Error::Unsegmentable(word.to_string()));
        }
        piece_ids.push(id);
        state = next;
    }
    Ok(Segmentation {
        word: word.to_string(),
        piece_ids,
    })
}

/// All parses of `word`, ordered by (piece count, piece ids), truncated to
/// `max_variants`. The greedy parse is always present.
pub fn enumerate_segmentations(
    word: &str,
    vocab: &SubwordVocab,
    max_variants: usize,
) -> Result<Vec<Segmentation>> {
    if max_variants == 0 {
        return Err(Error::Config("max_variants must be at least 1".into()));
    }
    let greedy = segment_greedy(word, vocab)?;
    let graph = ParseGraph::new(word, vocab);
    let feasible = graph.feasibility();

    let mut found: Vec<Vec<u32>> = Vec::new();
    let mut path = Vec::new();
    for count in 1..feasible[0].len() {
        if found.len() >= max_variants {
            break;
        }
        if feasible[0][count] {
            collect(
                &graph,
                &feasible,
                0,
                count,
                &mut path,
                &mut found,
                max_variants,
            );
        }
    }
    if !found.contains(&greedy.piece_ids) {
        // greedy sorts after everything kept, so it takes the last slot
        found.truncate(max_variants - 1);
        found.push(greedy.piece_ids);
    }
    Ok(found
        .into_iter()
        .map(|piece_ids| Segmentation {
            word: word.to_string(),
            piece_ids,
        })
        .collect())
}

fn collect(
    graph: &ParseGraph,
    feasible: &[Vec<bool>],
    state: usize,
    remaining: usize,
    path: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
    limit: usize,
) {
    if out.len() >= limit {
        return;
    }
    if remaining == 0 {
        if state == graph.goal {
            out.push(path.clone());
        }
        return;
    }
    for &(id, next) in &graph.edges[state] {
        if feasible[next][remaining - 1] {
            path.push(id);
            collect(graph, feasible, next, remaining - 1, path, out, limit);
            path.pop();
            if out.len() >= limit {
                return;
            }
        }
    }
}

/// Greedy segmentation of a space-separated phrase (words concatenated).
pub fn segment_phrase(phrase: &str, vocab: &SubwordVocab) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for w in phrase.split_whitespace() {
        ids.extend(segment_greedy(w, vocab)?.piece_ids);
    }
    if ids.is_empty() {
        return Err(Error::Unsegmentable(phrase.to_string()));
    }
    Ok(ids)
}

/// Segmentation variants of a multi-word phrase: the cartesian product of
/// per-word variants, in the same ordering as [`enumerate_segmentations`].
pub fn enumerate_phrase_segmentations(
    phrase: &str,
    vocab: &SubwordVocab,
    max_variants: usize,
) -> Result<Vec<Vec<u32>>> {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Unsegmentable(phrase.to_string()));
    }
    if words.len() == 1 {
        return Ok(enumerate_segmentations(words[0], vocab, max_variants)?
            .into_iter()
            .map(|s| s.piece_ids)
            .collect());
    }
    let per_word = words
        .iter()
        .map(|w| enumerate_segmentations(w, vocab, max_variants))
        .collect::<Result<Vec<_>>>()?;
    let mut combos: Vec<Vec<u32>> = vec![Vec::new()];
    for variants in &per_word {
        let mut next = Vec::with_capacity(combos.len() * variants.len());
        for prefix in &combos {
            for v in variants {
                let mut c = prefix.clone();
                c.extend_from_slice(&v.piece_ids);
                next.push(c);
            }
        }
        combos = next;
    }
    combos.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    combos.dedup();
    let greedy = segment_phrase(phrase, vocab)?;
    combos.truncate(max_variants);
    if !combos.contains(&greedy) {
        combos.truncate(max_variants - 1);
        combos.push(greedy);
    }
    Ok(combos)
}

/// Groups pieces into words at each word-start marker.
pub fn detokenize(piece_ids: &[u32], vocab: &SubwordVocab) -> Result<Detokenized> {
    let mut out = Detokenized::default();
    for &id in piece_ids {
        if id as usize >= vocab.len() {
            return Err(Error::LabelOutOfRange {
                id: id as usize,
                vocab: vocab.len(),
            });
        }
        if id == vocab.blank_id() {
            return Err(Error::Config("blank id in detokenizer input".into()));
        }
        let piece = vocab.piece(id);
        if let Some(rest) = piece.strip_prefix(WORD_START) {
            out.words.push(rest.to_string());
        } else {
            if out.words.is_empty() {
                out.words.push(String::new());
                out.leading_continuation = true;
            }
            out.words.last_mut().unwrap().push_str(piece);
        }
    }
    Ok(out)
}
