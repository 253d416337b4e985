//! Prefix tree over the subword spellings of catalog entities.
//!
//! Each entity contributes every segmentation variant of its canonical
//! spelling and of its grapheme-substitution variants. All paths carry the
//! canonical entity as their label, so a hit on a variant spelling surfaces as
//! the catalog word.

use std::collections::{BTreeMap, HashSet, VecDeque};

use crate::catalog::EntityCatalog;
use crate::error::{Error, Result};
use crate::math::NEG_INF;
use crate::tokenizer::enumerate_phrase_segmentations;
use crate::vocab::SubwordVocab;

pub const DEFAULT_SEG_VARIANTS: usize = 10;

/// Symmetric grapheme substitution rules, e.g. `t tt`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhoneSimilarityTable {
    pairs: Vec<(String, String)>,
}

impl PhoneSimilarityTable {
    pub fn new<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        let mut out: Vec<(String, String)> = Vec::new();
        for (i, (a, b)) in pairs.iter().enumerate() {
            let (a, b) = (a.as_ref(), b.as_ref());
            if a.is_empty() || b.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty substitution unit".into(),
                });
            }
            if a == b {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("identity pair {a:?}"),
                });
            }
            let dup = out
                .iter()
                .any(|(x, y)| (x == a && y == b) || (x == b && y == a));
            if !dup {
                out.push((a.to_string(), b.to_string()));
            }
        }
        Ok(Self { pairs: out })
    }

    /// Lines of `unit1 unit2`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                [a, b] => pairs.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("expected two units, got {line:?}"),
                    })
                }
            }
        }
        Self::new(&pairs)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(a, b)| format!("{a} {b}\n"))
            .collect()
    }

    /// Rules in both directions, table order.
    fn directed(&self) -> Vec<(&str, &str)> {
        self.pairs
            .iter()
            .flat_map(|(a, b)| [(a.as_str(), b.as_str()), (b.as_str(), a.as_str())])
            .collect()
    }
}

/// Alternative spellings of `word`: the canonical spelling first, then
/// breadth-first single substitutions, each applied to the right of the
/// previous one. At most `max_variants` alternatives are returned.
pub fn g2g_expand(word: &str, table: &PhoneSimilarityTable, max_variants: usize) -> Vec<String> {
    let mut out = vec![word.to_string()];
    if max_variants == 0 || table.is_empty() {
        return out;
    }
    let rules = table.directed();
    let mut seen: HashSet<String> = HashSet::from([word.to_string()]);
    let mut queue = VecDeque::from([(word.to_string(), 0usize)]);
    while let Some((s, min_pos)) = queue.pop_front() {
        for (pos, _) in s.char_indices().filter(|&(p, _)| p >= min_pos) {
            for &(from, to) in &rules {
                if !s[pos..].starts_with(from) {
                    continue;
                }
                let variant = format!("{}{}{}", &s[..pos], to, &s[pos + from.len()..]);
                if seen.insert(variant.clone()) {
                    out.push(variant.clone());
                    if out.len() > max_variants {
                        return out;
                    }
                    queue.push_back((variant, pos + to.len()));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Node {
    children: BTreeMap<u32, u32>,
    terminal: Option<u32>,
    /// Whether the terminal came from the canonical spelling.
    canonical: bool,
    smear: f64,
}

impl Node {
    fn new() -> Self {
        Self {
            children: BTreeMap::new(),
            terminal: None,
            canonical: false,
            smear: NEG_INF,
        }
    }
}

pub type NodeId = u32;

#[derive(Debug, Clone)]
pub struct BiasTrie {
    nodes: Vec<Node>,
    labels: Vec<String>,
}

/// Knobs for [`BiasTrie::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrieConfig {
    pub seg_variants: usize,
    pub g2g_variants: usize,
}

impl Default for TrieConfig {
    fn default() -> Self {
        Self {
            seg_variants: DEFAULT_SEG_VARIANTS,
            g2g_variants: 0,
        }
    }
}

impl BiasTrie {
    pub const ROOT: NodeId = 0;

    pub fn empty() -> Self {
        Self {
            nodes: vec![Node::new()],
            labels: Vec::new(),
        }
    }

    /// Builds the trie from every entity's spelling and segmentation variants.
    pub fn build(
        catalog: &EntityCatalog,
        vocab: &SubwordVocab,
        table: &PhoneSimilarityTable,
        config: &TrieConfig,
    ) -> Result<Self> {
        let mut trie = Self::empty();
        trie.labels = catalog.entities().to_vec();
        let mut failed = Vec::new();
        for (label, entity) in catalog.entities().iter().enumerate() {
            let spellings = g2g_expand(entity, table, config.g2g_variants);
            for (k, spelling) in spellings.iter().enumerate() {
                let canonical = k == 0;
                match enumerate_phrase_segmentations(spelling, vocab, config.seg_variants) {
                    Ok(paths) => {
                        for path in paths {
                            trie.insert(&path, label as u32, canonical, vocab);
                        }
                    }
                    Err(_) if canonical => failed.push(entity.clone()),
                    // variant spellings may use characters the vocabulary lacks
                    Err(_) => {}
                }
            }
        }
        if !failed.is_empty() {
            return Err(Error::UnsegmentableEntities(failed));
        }
        Ok(trie)
    }

    fn insert(&mut self, path: &[u32], label: u32, canonical: bool, vocab: &SubwordVocab) {
        debug_assert!(path.iter().all(|&p| p != vocab.blank_id()));
        let mut node = 0usize;
        for &id in path {
            node = match self.nodes[node].children.get(&id) {
                Some(&child) => child as usize,
                None => {
                    let child = self.nodes.len();
                    self.nodes.push(Node::new());
                    self.nodes[node].children.insert(id, child as u32);
                    child
                }
            };
        }
        let n = &mut self.nodes[node];
        let replace = match n.terminal {
            None => true,
            // canonical spellings win; otherwise the smaller label string, so
            // the result does not depend on catalog order
            Some(old) => {
                (canonical, std::cmp::Reverse(&self.labels[label as usize]))
                    > (n.canonical, std::cmp::Reverse(&self.labels[old as usize]))
            }
        };
        if replace {
            n.terminal = Some(label);
            n.canonical = canonical;
        }
    }

    /// Follows the edge labelled `piece` from `node`.
    pub fn advance(&self, node: NodeId, piece: u32) -> Option<(NodeId, Option<u32>)> {
        let child = *self.nodes[node as usize].children.get(&piece)?;
        Some((child, self.nodes[child as usize].terminal))
    }

    pub fn terminal(&self, node: NodeId) -> Option<u32> {
        self.nodes[node as usize].terminal
    }

    pub fn has_children(&self, node: NodeId) -> bool {
        !self.nodes[node as usize].children.is_empty()
    }

    pub fn smear(&self, node: NodeId) -> f64 {
        self.nodes[node as usize].smear
    }

    pub fn label(&self, label: u32) -> &str {
        &self.labels[label as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (u32, NodeId)> + '_ {
        self.nodes[node as usize]
            .children
            .iter()
            .map(|(&p, &c)| (p, c))
    }

    /// Every root-to-terminal path with its label, in lexicographic path order.
    pub fn paths(&self) -> Vec<(Vec<u32>, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if let Some(l) = self.terminal(node) {
                out.push((path.clone(), self.labels[l as usize].clone()));
            }
            for (p, c) in self.children(node) {
                let mut next = path.clone();
                next.push(p);
                stack.push((c, next));
            }
        }
        out.sort();
        out
    }

    /// Sets each node's smear to the max of `score(label)` over the terminals
    /// at or below it.
    pub(crate) fn fill_smear(&mut self, score: impl Fn(usize) -> f64) {
        // children always have larger indices than their parents
        for i in (0..self.nodes.len()).rev() {
            let own = self.nodes[i]
                .terminal
                .map_or(NEG_INF, |l| score(l as usize));
            let best_child = self.nodes[i]
                .children
                .values()
                .map(|&c| self.nodes[c as usize].smear)
                .fold(NEG_INF, f64::max);
            self.nodes[i].smear = own.max(best_child);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(pieces: &[&str]) -> SubwordVocab {
        SubwordVocab::with_blank(pieces).unwrap()
    }

    #[test]
    fn g2g_single_site() {
        let table = PhoneSimilarityTable::parse("t tt\n").unwrap();
        assert_eq!(g2g_expand("putin", &table, 5), vec!["putin", "puttin"]);
        assert_eq!(g2g_expand("putin", &table, 0), vec!["putin"]);
        assert_eq!(
            g2g_expand("putin", &PhoneSimilarityTable::default(), 5),
            vec!["putin"]
        );
    }

    #[test]
    fn g2g_truncates_breadth_first() {
        let table = PhoneSimilarityTable::parse("a e\n").unwrap();
        assert_eq!(g2g_expand("aa", &table, 2), vec!["aa", "ea", "ae"]);
        assert_eq!(g2g_expand("aa", &table, 10), vec!["aa", "ea", "ae", "ee"]);
    }

    #[test]
    fn similarity_table_rejects_identity() {
        assert!(PhoneSimilarityTable::parse("a a\n").is_err());
        assert!(PhoneSimilarityTable::parse("a b c\n").is_err());
    }

    #[test]
    fn both_parses_share_label() {
        let v = vocab(&["▁ab", "▁a", "b"]);
        let cat = EntityCatalog::new(&["ab"]).unwrap();
        let trie = BiasTrie::build(
            &cat,
            &v,
            &PhoneSimilarityTable::default(),
            &TrieConfig::default(),
        )
        .unwrap();
        let paths = trie.paths();
        let id = |p: &str| v.id(p).unwrap();
        assert_eq!(
            paths,
            vec![
                (vec![id("▁ab")], "ab".to_string()),
                (vec![id("▁a"), id("b")], "ab".to_string()),
            ]
        );
    }

    #[test]
    fn empty_catalog_has_only_root() {
        let v = vocab(&["▁a"]);
        let trie = BiasTrie::build(
            &EntityCatalog::default(),
            &v,
            &PhoneSimilarityTable::default(),
            &TrieConfig::default(),
        )
        .unwrap();
        assert_eq!(trie.node_count(), 1);
        assert!(trie.paths().is_empty());
    }

    #[test]
    fn shared_prefix_node() {
        let v = vocab(&["▁a", "b", "c"]);
        let cat = EntityCatalog::new(&["ab", "ac"]).unwrap();
        let trie = BiasTrie::build(
            &cat,
            &v,
            &PhoneSimilarityTable::default(),
            &TrieConfig::default(),
        )
        .unwrap();
        assert_eq!(trie.node_count(), 4);
        let (inner, label) = trie.advance(BiasTrie::ROOT, v.id("▁a").unwrap()).unwrap();
        assert_eq!(label, None);
        assert_eq!(trie.children(inner).count(), 2);
    }

    #[test]
    fn advance_steps() {
        let v = vocab(&["▁put", "in", "b"]);
        let cat = EntityCatalog::new(&["putin"]).unwrap();
        let trie = BiasTrie::build(
            &cat,
            &v,
            &PhoneSimilarityTable::default(),
            &TrieConfig::default(),
        )
        .unwrap();
        let (inner, l) = trie.advance(BiasTrie::ROOT, v.id("▁put").unwrap()).unwrap();
        assert_eq!(l, None);
        let (_, l) = trie.advance(inner, v.id("in").unwrap()).unwrap();
        assert_eq!(trie.label(l.unwrap()), "putin");
        assert!(trie.advance(BiasTrie::ROOT, v.id("b").unwrap()).is_none());
    }

    #[test]
    fn unsegmentable_entities_are_listed() {
        let v = vocab(&["▁a"]);
        let cat = EntityCatalog::new(&["a", "xy", "zz"]).unwrap();
        match BiasTrie::build(
            &cat,
            &v,
            &PhoneSimilarityTable::default(),
            &TrieConfig::default(),
        ) {
            Err(Error::UnsegmentableEntities(list)) => assert_eq!(list, vec!["xy", "zz"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn g2g_variant_labels_canonical_entity() {
        let v = vocab(&["▁p", "u", "t", "i", "n"]);
        let cat = EntityCatalog::new(&["putin"]).unwrap();
        let table = PhoneSimilarityTable::parse("t tt\n").unwrap();
        let cfg = TrieConfig {
            seg_variants: 10,
            g2g_variants: 3,
        };
        let trie = BiasTrie::build(&cat, &v, &table, &cfg).unwrap();
        let id = |p: &str| v.id(p).unwrap();
        let variant = vec![id("▁p"), id("u"), id("t"), id("t"), id("i"), id("n")];
        assert!(trie.paths().contains(&(variant, "putin".to_string())));
    }
}
