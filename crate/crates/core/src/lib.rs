//! Contextual biasing for CTC speech recognition.

pub mod adapter;
pub mod biastrie;
pub mod catalog;
pub mod decoder;
pub mod emissions;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod hypothesis;
pub mod lm;
pub mod math;
pub mod phonealign;
pub mod phones;
pub mod pipeline;
pub mod tokenizer;
pub mod vocab;

pub use biastrie::{BiasTrie, PhoneSimilarityTable, TrieConfig};
pub use catalog::EntityCatalog;
pub use decoder::{ctc_label_score, BoostMode, BoostSign, DecodeConfig, Decoder};
pub use emissions::{EmissionMatrix, PhonePosteriorMatrix};
pub use error::{Error, Result};
pub use hypothesis::{Hypothesis, NBestList, UtteranceResult};
pub use lm::{LmState, NGramModel};
pub use phones::{Lexicon, PhoneSet};
pub use vocab::SubwordVocab;
