use proptest::prelude::*;

use ctcbias::lm::smear;
use ctcbias::tokenizer::enumerate_phrase_segmentations;
use ctcbias::{
    BiasTrie, EntityCatalog, NGramModel, PhoneSimilarityTable, SubwordVocab, TrieConfig,
};

const ARPA: &str = "\\data\\
ngram 1=6
ngram 2=5
ngram 3=2

\\1-grams:
-0.8\t<unk>
-1.0\t<s>\t-0.4
-0.9\t</s>
-0.5\ta\t-0.3
-0.7\tb\t-0.2
-1.2\tab\t-0.1

\\2-grams:
-0.3\t<s> a\t-0.2
-0.4\ta b\t-0.1
-0.6\tb a
-0.2\tb </s>
-0.9\tab a

\\3-grams:
-0.1\t<s> a b
-0.3\ta b a

\\end\\
";

const WORDS: [&str; 6] = ["a", "b", "ab", "ba", "bab", "<unk>"];

fn model() -> NGramModel {
    NGramModel::from_arpa(ARPA).unwrap()
}

fn sentence() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..8)
}

fn vocab() -> SubwordVocab {
    SubwordVocab::with_blank(&["▁", "▁a", "▁b", "a", "b", "ab", "ba", "▁ab"]).unwrap()
}

fn catalog_words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::btree_set("[ab]{1,5}( [ab]{1,3})?", 1..6)
        .prop_map(|s| s.into_iter().collect())
}

proptest! {
    #[test]
    fn sentence_score_is_the_sum_of_word_scores(words in sentence(), with_end in any::<bool>()) {
        let lm = model();
        let mut state = lm.begin_state();
        let mut total = 0.0;
        for w in &words {
            let (s, next) = lm.score_word(&state, w);
            total += s;
            state = next;
        }
        if with_end {
            total += lm.end_score(&state);
        }
        prop_assert!((lm.score_sentence(&words, with_end) - total).abs() < 1e-12);
    }

    #[test]
    fn unigram_boost_never_lowers_scores(
        boosted_words in prop::collection::vec(prop::sample::select(&WORDS[..5]), 1..4),
        level in -4.0f64..-0.01,
        words in sentence(),
    ) {
        let lm = model();
        let boosted = lm.apply_unigram_boost(&boosted_words, level).unwrap();
        prop_assert!(boosted.score_sentence(&words, true) >= lm.score_sentence(&words, true) - 1e-12);
        for w in WORDS {
            if boosted_words.contains(&w) {
                prop_assert!(boosted.unigram_score(w) >= lm.unigram_score(w));
            } else {
                prop_assert_eq!(boosted.unigram_score(w), lm.unigram_score(w));
            }
        }
    }

    #[test]
    fn smear_never_grows_down_the_trie(entities in catalog_words()) {
        let vocab = vocab();
        let catalog = EntityCatalog::new(&entities).unwrap();
        let mut trie = BiasTrie::build(&catalog, &vocab, &PhoneSimilarityTable::default(), &TrieConfig::default())
            .unwrap();
        smear(&mut trie, &model());
        let mut stack = vec![BiasTrie::ROOT];
        while let Some(node) = stack.pop() {
            for (_, child) in trie.children(node) {
                prop_assert!(trie.smear(node) >= trie.smear(child));
                stack.push(child);
            }
        }
    }

    #[test]
    fn trie_ignores_catalog_order(entities in catalog_words(), rotate in 0usize..6) {
        let vocab = vocab();
        let table = PhoneSimilarityTable::default();
        let config = TrieConfig::default();
        let mut shuffled = entities.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        let a = BiasTrie::build(&EntityCatalog::new(&entities).unwrap(), &vocab, &table, &config).unwrap();
        let b = BiasTrie::build(&EntityCatalog::new(&shuffled).unwrap(), &vocab, &table, &config).unwrap();
        prop_assert_eq!(a.paths(), b.paths());
        prop_assert_eq!(a.node_count(), b.node_count());
    }

    #[test]
    fn trie_holds_exactly_the_segmentation_variants(entities in catalog_words(), variants in 1usize..12) {
        let vocab = vocab();
        let catalog = EntityCatalog::new(&entities).unwrap();
        let config = TrieConfig { seg_variants: variants, g2g_variants: 0 };
        let trie = BiasTrie::build(&catalog, &vocab, &PhoneSimilarityTable::default(), &config).unwrap();
        let mut expected = Vec::new();
        for e in catalog.entities() {
            for path in enumerate_phrase_segmentations(e, &vocab, variants).unwrap() {
                expected.push((path, e.clone()));
            }
        }
        expected.sort();
        let paths = trie.paths();
        let pieces: usize = paths.iter().map(|(p, _)| p.len()).sum();
        prop_assert!(trie.node_count() <= pieces + 1);
        prop_assert_eq!(paths, expected);
    }
}
