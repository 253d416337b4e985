use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctcbias::decoder::{boosting_scale, decode};
use ctcbias::hypothesis::write_jsonl;
use ctcbias::{
    ctc_label_score, BiasTrie, BoostMode, BoostSign, DecodeConfig, EmissionMatrix, EntityCatalog,
    PhoneSimilarityTable, SubwordVocab, TrieConfig, UtteranceResult,
};

fn emissions(seed: u64, t: usize, v: usize) -> EmissionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|x| x / z).collect()
        })
        .collect();
    EmissionMatrix::from_prob_rows(&rows).unwrap()
}

fn vocab() -> SubwordVocab {
    SubwordVocab::with_blank(&["▁a", "b", "▁c", "d", "▁ab"]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn boost_scale_is_a_fraction(rank in 1usize..=10, gap in 0.0f64..60.0) {
        let d = boosting_scale(rank, gap, BoostSign::Corrected);
        prop_assert!(d > 0.0 && d < 1.0, "{d}");
    }

    #[test]
    fn boost_scale_falls_with_gap(rank in 1usize..=10, gap in 0.0f64..30.0, step in 1e-3f64..10.0) {
        prop_assert!(
            boosting_scale(rank, gap + step, BoostSign::Corrected)
                < boosting_scale(rank, gap, BoostSign::Corrected)
        );
    }

    #[test]
    fn exhaustive_beam_never_lowers_the_best_score(
        seed in any::<u64>(),
        t in 1usize..=4,
        narrow in 1usize..=8,
    ) {
        let vocab = vocab();
        let m = emissions(seed, t, vocab.len());
        let config = |beam| DecodeConfig {
            beam_size: beam,
            top_k: vocab.len(),
            beam_threshold: f64::INFINITY,
            boost_mode: BoostMode::Off,
            ..DecodeConfig::default()
        };
        let exact = |pieces: &[u32]| ctc_label_score(&m, vocab.blank_id(), pieces).unwrap();
        let a = decode(&m, &vocab, None, None, &config(narrow)).unwrap().remove(0);
        let b = decode(&m, &vocab, None, None, &config(vocab.len().pow(t as u32))).unwrap().remove(0);
        prop_assert!(b.ctc_score >= a.ctc_score - 1e-12);
        prop_assert!(exact(&b.pieces) >= exact(&a.pieces) - 1e-12);
    }

    #[test]
    fn decoding_is_deterministic(seed in any::<u64>(), t in 1usize..=10) {
        let vocab = vocab();
        let m = emissions(seed, t, vocab.len());
        let catalog = EntityCatalog::new(&["abd", "cd"]).unwrap();
        let trie = BiasTrie::build(&catalog, &vocab, &PhoneSimilarityTable::default(), &TrieConfig::default())
            .unwrap();
        let run = || {
            let config = DecodeConfig { top_k: vocab.len(), ..DecodeConfig::default() };
            let nbest = decode(&m, &vocab, None, Some(&trie), &config).unwrap();
            write_jsonl(&[UtteranceResult { id: "u".into(), nbest }]).unwrap()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn literal_sign_scale_rises_with_gap() {
    assert!(
        boosting_scale(3, 2.0, BoostSign::PaperLiteral)
            > boosting_scale(3, 1.0, BoostSign::PaperLiteral)
    );
}
