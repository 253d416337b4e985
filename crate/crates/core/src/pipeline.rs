//! Decode, rescore and correct a batch of utterances, then score them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biastrie::{BiasTrie, PhoneSimilarityTable, TrieConfig};
use crate::catalog::EntityCatalog;
use crate::decoder::{BoostMode, DecodeConfig, Decoder};
use crate::emissions::{EmissionMatrix, PhonePosteriorMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, RarityTable};
use crate::fixtures::Corpus;
use crate::hypothesis::{Hypothesis, NBestList, UtteranceResult};
use crate::lm::{smear, NGramModel, DEFAULT_UNIGRAM_BOOST_LOG10};
use crate::phonealign::{
    lexicon_lookup_replace, rescore_nbest, PhoneContext, RescoreConfig, DEFAULT_SMOOTH_WINDOW,
};
use crate::phones::{Lexicon, PhoneSet};
use crate::vocab::SubwordVocab;

/// Models and word lists shared by every utterance.
#[derive(Debug, Clone)]
pub struct Resources {
    pub vocab: SubwordVocab,
    pub lm: Option<NGramModel>,
    pub catalog: EntityCatalog,
    pub lexicon: Lexicon,
    pub phones: PhoneSet,
    pub g2g: PhoneSimilarityTable,
}

impl Resources {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            vocab: corpus.vocab.clone(),
            lm: Some(NGramModel::from_arpa(&corpus.lm_arpa)?),
            catalog: corpus.catalog.clone(),
            lexicon: corpus.lexicon.clone(),
            phones: corpus.phones.clone(),
            g2g: corpus.g2g.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub decode: DecodeConfig,
    pub trie: TrieConfig,
    /// Raise the LM unigram of every catalog word to at least this log10
    /// probability.
    pub unigram_boost: Option<f64>,
    pub rescore: Option<RescoreConfig>,
    /// Lexicon correction of the 1-best with this smoothing window.
    pub correct: Option<usize>,
}

impl PipelineConfig {
    /// Plain decoding: no boosting, no rescoring, no correction.
    pub fn baseline() -> Self {
        Self {
            decode: DecodeConfig {
                boost_mode: BoostMode::Off,
                ..DecodeConfig::default()
            },
            trie: TrieConfig::default(),
            unigram_boost: None,
            rescore: None,
            correct: None,
        }
    }

    /// Every biasing stage with its default settings.
    pub fn full() -> Self {
        Self {
            decode: DecodeConfig::default(),
            trie: TrieConfig {
                g2g_variants: 10,
                ..TrieConfig::default()
            },
            unigram_boost: Some(DEFAULT_UNIGRAM_BOOST_LOG10),
            rescore: Some(RescoreConfig::default()),
            correct: Some(DEFAULT_SMOOTH_WINDOW),
        }
    }

    fn needs_posteriors(&self) -> bool {
        self.rescore.is_some() || self.correct.is_some()
    }
}

/// One utterance to process.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceInput<'a> {
    pub id: &'a str,
    pub emissions: &'a EmissionMatrix,
    pub posteriors: Option<&'a PhonePosteriorMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub id: String,
    /// Decoder n-best, reordered when rescoring ran.
    pub nbest: NBestList,
    /// Final 1-best after lexicon correction.
    pub best: Hypothesis,
}

impl PipelineResult {
    pub fn as_utterance_result(&self) -> UtteranceResult {
        UtteranceResult {
            id: self.id.clone(),
            nbest: self.nbest.clone(),
        }
    }
}

/// Prepared pipeline: the boosted LM and the bias trie are built once.
pub struct Pipeline<'a> {
    resources: &'a Resources,
    config: PipelineConfig,
    lm: Option<NGramModel>,
    trie: Option<BiasTrie>,
}

impl<'a> Pipeline<'a> {
    pub fn new(resources: &'a Resources, config: PipelineConfig) -> Result<Self> {
        config.decode.validate(resources.vocab.len())?;
        let words: Vec<&str> = resources
            .catalog
            .entities()
            .iter()
            .flat_map(|e| e.split_whitespace())
            .collect();
        let lm = match (&resources.lm, config.unigram_boost) {
            (Some(lm), Some(b)) => Some(lm.apply_unigram_boost(&words, b)?),
            (lm, _) => lm.clone(),
        };
        let trie = match config.decode.boost_mode {
            BoostMode::Off => None,
            BoostMode::Adaptive => {
                let mut trie = BiasTrie::build(
                    &resources.catalog,
                    &resources.vocab,
                    &resources.g2g,
                    &config.trie,
                )?;
                if let Some(lm) = &lm {
                    smear(&mut trie, lm);
                }
                Some(trie)
            }
        };
        Ok(Self {
            resources,
            config,
            lm,
            trie,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_one(&self, utt: UtteranceInput<'_>) -> Result<PipelineResult> {
        let res = self.resources;
        let decoder = Decoder::new(
            &res.vocab,
            self.lm.as_ref(),
            self.trie.as_ref(),
            self.config.decode.clone(),
        )?;
        let mut nbest = decoder.decode(utt.emissions)?;
        let posteriors = match (utt.posteriors, self.config.needs_posteriors()) {
            (Some(p), _) => Some(p),
            (None, false) => None,
            (None, true) => {
                return Err(Error::Config(format!(
                    "utterance {}: rescoring and correction need phone posteriors",
                    utt.id
                )))
            }
        };
        let ctx = PhoneContext {
            lexicon: &res.lexicon,
            phones: &res.phones,
            vocab: &res.vocab,
        };
        if let (Some(cfg), Some(post)) = (self.config.rescore, posteriors) {
            nbest = rescore_nbest(&nbest, utt.emissions, post, ctx, cfg)?;
        }
        let mut best = nbest.first().cloned().unwrap_or_else(Hypothesis::empty);
        if let (Some(window), Some(post)) = (self.config.correct, posteriors) {
            if best.word_boundaries.is_none() {
                // correction needs word spans, which come from the alignment
                best = rescore_nbest(
                    std::slice::from_ref(&best),
                    utt.emissions,
                    post,
                    ctx,
                    RescoreConfig::default(),
                )?
                .remove(0);
            }
            best = lexicon_lookup_replace(
                &best,
                post,
                &res.catalog,
                &res.lexicon,
                &res.phones,
                window,
            )?;
        }
        Ok(PipelineResult {
            id: utt.id.to_string(),
            nbest,
            best,
        })
    }

    /// Processes utterances in parallel; results keep the input order.
    pub fn run(&self, utts: &[UtteranceInput<'_>]) -> Result<Vec<PipelineResult>> {
        utts.par_iter().map(|u| self.run_one(*u)).collect()
    }
}

/// Report for one configuration on a corpus, overall and split into
/// utterances with and without entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub overall: EvalReport,
    pub entity: EvalReport,
    pub control: EvalReport,
}

/// Runs `config` over every utterance of `corpus` and scores the final
/// 1-best against the references.
pub fn run_corpus(
    corpus: &Corpus,
    resources: &Resources,
    config: PipelineConfig,
) -> Result<(Vec<PipelineResult>, CorpusReport)> {
    let pipeline = Pipeline::new(resources, config)?;
    let inputs: Vec<UtteranceInput<'_>> = corpus
        .utterances
        .iter()
        .map(|u| UtteranceInput {
            id: &u.id,
            emissions: &u.emissions,
            posteriors: Some(&u.posteriors),
        })
        .collect();
    let results = pipeline.run(&inputs)?;
    let score = |keep: &dyn Fn(bool) -> bool| {
        let pairs: Vec<(Vec<String>, Vec<String>)> = corpus
            .utterances
            .iter()
            .zip(&results)
            .filter(|(u, _)| keep(u.has_entity))
            .map(|(u, r)| (u.words.clone(), r.best.words.clone()))
            .collect();
        evaluate(&pairs, &corpus.frequencies)
    };
    let report = CorpusReport {
        overall: score(&|_| true),
        entity: score(&|e| e),
        control: score(&|e| !e),
    };
    Ok((results, report))
}

/// Pairs references with hypotheses by utterance id. Every reference id
/// must have a hypothesis.
pub fn pair_transcripts(
    refs: &[(String, Vec<String>)],
    hyps: &[(String, Vec<String>)],
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let by_id: std::collections::HashMap<&str, &Vec<String>> =
        hyps.iter().map(|(id, w)| (id.as_str(), w)).collect();
    refs.iter()
        .map(|(id, r)| {
            by_id
                .get(id.as_str())
                .map(|h| (r.clone(), (*h).clone()))
                .ok_or_else(|| Error::Config(format!("no hypothesis for utterance {id:?}")))
        })
        .collect()
}

/// Scores an id-keyed hypothesis set against references.
pub fn evaluate_transcripts(
    refs: &[(String, Vec<String>)],
    hyps: &[(String, Vec<String>)],
    table: &RarityTable,
) -> Result<EvalReport> {
    Ok(evaluate(&pair_transcripts(refs, hyps)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::decode;
    use crate::fixtures::FixtureConfig;

    fn corpus() -> Corpus {
        Corpus::generate(&FixtureConfig {
            entity_utterances: 20,
            control_utterances: 10,
            ..FixtureConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn baseline_matches_plain_decoding() {
        let c = corpus();
        let res = Resources::from_corpus(&c).unwrap();
        let (results, _) = run_corpus(&c, &res, PipelineConfig::baseline()).unwrap();
        let cfg = PipelineConfig::baseline().decode;
        for (u, r) in c.utterances.iter().zip(&results) {
            let direct = decode(&u.emissions, &res.vocab, res.lm.as_ref(), None, &cfg).unwrap();
            assert_eq!(
                serde_json::to_string(&direct).unwrap(),
                serde_json::to_string(&r.nbest).unwrap()
            );
            assert_eq!(r.best, direct[0]);
        }
    }

    #[test]
    fn full_pipeline_improves_entity_recall() {
        let c = corpus();
        let res = Resources::from_corpus(&c).unwrap();
        let (_, base) = run_corpus(&c, &res, PipelineConfig::baseline()).unwrap();
        let (_, full) = run_corpus(&c, &res, PipelineConfig::full()).unwrap();
        let recall = |r: &CorpusReport| r.entity.rare.recall.unwrap();
        assert!(
            recall(&full) > recall(&base),
            "{} vs {}",
            recall(&full),
            recall(&base)
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let c = corpus();
        let res = Resources::from_corpus(&c).unwrap();
        let (a, ra) = run_corpus(&c, &res, PipelineConfig::full()).unwrap();
        let (b, rb) = run_corpus(&c, &res, PipelineConfig::full()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn missing_posteriors_are_reported() {
        let c = corpus();
        let res = Resources::from_corpus(&c).unwrap();
        let p = Pipeline::new(&res, PipelineConfig::full()).unwrap();
        let u = &c.utterances[0];
        let err = p
            .run_one(UtteranceInput {
                id: &u.id,
                emissions: &u.emissions,
                posteriors: None,
            })
            .unwrap_err();
        assert!(err.to_string().contains(&u.id));
    }

    #[test]
    fn transcripts_pair_by_id() {
        let refs = vec![("a".to_string(), vec!["x".to_string()])];
        let hyps = vec![
            ("b".to_string(), vec![]),
            ("a".to_string(), vec!["x".to_string()]),
        ];
        assert_eq!(pair_transcripts(&refs, &hyps).unwrap().len(), 1);
        assert!(pair_transcripts(&refs, &hyps[..1]).is_err());
    }
}
