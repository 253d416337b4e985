//! Seeded synthetic corpus for end-to-end runs of the biasing pipeline.
//!
//! Phones are the letters `a`..`z` plus silence and every word is
//! pronounced as it is spelled. Common words have whole-word subword pieces
//! and crisp emissions. Catalog entities are spelled with letter pieces and
//! planted below the frame's top candidate: either under a dominant blank
//! (the baseline drops the word) or under a confusable letter (the baseline
//! misspells it). Phone posteriors always follow the reference transcript.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::biastrie::PhoneSimilarityTable;
use crate::catalog::EntityCatalog;
use crate::emissions::{EmissionMatrix, PhonePosteriorMatrix};
use crate::error::{read_file, read_text, write_file, Error, Result};
use crate::eval::{RarityTable, DEFAULT_RARE_THRESHOLD};
use crate::lm::{BOS, EOS, UNK};
use crate::phones::{Lexicon, PhoneSet, SILENCE};
use crate::vocab::{SubwordVocab, WORD_START};

pub const COMMON_WORDS: [&str; 40] = [
    "the", "a", "to", "and", "of", "call", "send", "message", "play", "music", "from", "with",
    "meeting", "today", "tomorrow", "please", "set", "reminder", "for", "at", "open", "show", "me",
    "my", "new", "email", "about", "report", "book", "table", "near", "home", "work", "after",
    "lunch", "order", "ticket", "weather", "check", "notes",
];

/// Symmetric letter confusions used both for misspelled plantings and as
/// the G2G substitution table.
pub const CONFUSIONS: [(&str, &str); 6] = [
    ("c", "k"),
    ("s", "z"),
    ("i", "y"),
    ("f", "v"),
    ("m", "n"),
    ("d", "t"),
];

const ONSETS: [&str; 14] = [
    "b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub entity_utterances: usize,
    pub control_utterances: usize,
    pub rare_entities: usize,
    pub oov_entities: usize,
    /// Sentences in the text corpus behind the LM and frequency table.
    pub lm_sentences: usize,
    /// Share of entity plantings that hide under blank rather than under a
    /// confusable letter.
    pub deletion_share: f64,
    /// Share of common-word frames whose top candidate is another word.
    pub confusion_rate: f64,
    /// Range of the log-probability gap between the top candidate and a
    /// planted entity piece.
    pub min_gap: f64,
    pub max_gap: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            entity_utterances: 100,
            control_utterances: 100,
            rare_entities: 14,
            oov_entities: 6,
            lm_sentences: 2000,
            deletion_share: 0.4,
            confusion_rate: 0.05,
            min_gap: 0.3,
            max_gap: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub words: Vec<String>,
    pub emissions: EmissionMatrix,
    pub posteriors: PhonePosteriorMatrix,
    /// Whether a catalog entity is spoken.
    pub has_entity: bool,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: SubwordVocab,
    pub phones: PhoneSet,
    pub lexicon: Lexicon,
    pub catalog: EntityCatalog,
    pub g2g: PhoneSimilarityTable,
    pub lm_arpa: String,
    pub frequencies: RarityTable,
    pub utterances: Vec<SyntheticUtterance>,
}

pub const UPSAMPLE: u32 = 2;

impl Corpus {
    pub fn generate(config: &FixtureConfig) -> Result<Self> {
        if config.rare_entities + config.oov_entities == 0 {
            return Err(Error::Config("fixture needs at least one entity".into()));
        }
        if !(0.0 < config.min_gap && config.min_gap <= config.max_gap) {
            return Err(Error::Config(
                "gap range must be positive and ordered".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let letters: Vec<String> = ('a'..='z').map(String::from).collect();

        let mut pieces: Vec<String> = Vec::new();
        for l in &letters {
            pieces.push(format!("{WORD_START}{l}"));
            pieces.push(l.clone());
        }
        for w in COMMON_WORDS {
            let piece = format!("{WORD_START}{w}");
            if !pieces.contains(&piece) {
                pieces.push(piece);
            }
        }
        let vocab = SubwordVocab::with_blank(&pieces)?;

        let mut phone_syms = letters.clone();
        phone_syms.push(SILENCE.to_string());
        let phones = PhoneSet::new(phone_syms)?;

        let entities = entity_names(&mut rng, config.rare_entities + config.oov_entities);
        let catalog = EntityCatalog::new(&entities)?;
        let (rare, oov) = entities.split_at(config.rare_entities);

        let mut lexicon = Lexicon::default();
        for w in COMMON_WORDS
            .iter()
            .copied()
            .chain(entities.iter().map(String::as_str))
        {
            let pron = w
                .chars()
                .map(|c| phones.id(&c.to_string()).unwrap())
                .collect();
            lexicon.insert(w, pron);
        }

        // text corpus: common-word sentences, plus each rare entity a few times
        let mut sentences: Vec<Vec<String>> = (0..config.lm_sentences)
            .map(|_| common_sentence(&mut rng, 3..=6))
            .collect();
        for r in rare {
            for _ in 0..rng.gen_range(2..=12) {
                let s = rng.gen_range(0..sentences.len());
                let pos = rng.gen_range(0..=sentences[s].len());
                sentences[s].insert(pos, r.clone());
            }
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for s in &sentences {
            for w in s {
                *counts.entry(w.clone()).or_insert(0) += 1;
            }
        }
        let frequencies = RarityTable::new(counts, DEFAULT_RARE_THRESHOLD);
        let lm_arpa = bigram_arpa(&sentences);

        let g2g = PhoneSimilarityTable::new(&CONFUSIONS)?;
        let builder = Builder {
            vocab: &vocab,
            phones: &phones,
            config,
        };
        let mut utterances = Vec::new();
        let spoken: Vec<&String> = rare.iter().chain(oov).collect();
        for i in 0..config.entity_utterances {
            let entity = spoken[i % spoken.len()].clone();
            let mut words = common_sentence(&mut rng, 2..=5);
            let pos = rng.gen_range(0..=words.len());
            words.insert(pos, entity);
            let deletion = rng.gen_bool(config.deletion_share);
            let (emissions, posteriors) =
                builder.render(&words, Some((pos, deletion)), &mut rng)?;
            utterances.push(SyntheticUtterance {
                id: format!("ent{i:03}"),
                words,
                emissions,
                posteriors,
                has_entity: true,
            });
        }
        for i in 0..config.control_utterances {
            let words = common_sentence(&mut rng, 3..=6);
            let (emissions, posteriors) = builder.render(&words, None, &mut rng)?;
            utterances.push(SyntheticUtterance {
                id: format!("ctl{i:03}"),
                words,
                emissions,
                posteriors,
                has_entity: false,
            });
        }
        Ok(Self {
            vocab,
            phones,
            lexicon,
            catalog,
            g2g,
            lm_arpa,
            frequencies,
            utterances,
        })
    }

    /// Reference transcripts as `id word word ...` lines.
    pub fn references(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            writeln!(out, "{} {}", u.id, u.words.join(" ")).unwrap();
        }
        out
    }

    /// Writes the corpus as a directory of plain files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["", "emissions", "posteriors"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write_file(dir.join(files::VOCAB), self.vocab.to_text())?;
        write_file(dir.join(files::PHONES), self.phones.to_text())?;
        write_file(dir.join(files::LEXICON), self.lexicon.to_text(&self.phones))?;
        write_file(dir.join(files::CATALOG), self.catalog.to_text())?;
        write_file(dir.join(files::G2G), self.g2g.to_text())?;
        write_file(dir.join(files::LM), &self.lm_arpa)?;
        write_file(dir.join(files::FREQUENCIES), self.frequencies.to_text())?;
        write_file(dir.join(files::REFERENCES), self.references())?;
        for u in &self.utterances {
            write_file(
                dir.join("emissions").join(format!("{}.ctce", u.id)),
                u.emissions.to_bytes(),
            )?;
            write_file(
                dir.join("posteriors").join(format!("{}.ctcp", u.id)),
                u.posteriors.to_bytes(),
            )?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Corpus::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let vocab = SubwordVocab::parse(&read_text(dir.join(files::VOCAB))?)?;
        let phones = PhoneSet::parse(&read_text(dir.join(files::PHONES))?)?;
        let lexicon = Lexicon::parse(&read_text(dir.join(files::LEXICON))?, &phones)?;
        let catalog = EntityCatalog::parse(&read_text(dir.join(files::CATALOG))?)?;
        let g2g = PhoneSimilarityTable::parse(&read_text(dir.join(files::G2G))?)?;
        let lm_arpa = read_text(dir.join(files::LM))?;
        let frequencies = RarityTable::parse(
            &read_text(dir.join(files::FREQUENCIES))?,
            DEFAULT_RARE_THRESHOLD,
        )?;
        let entity_words: HashSet<&str> = catalog
            .entities()
            .iter()
            .flat_map(|e| e.split_whitespace())
            .collect();
        let mut utterances = Vec::new();
        for (id, words) in parse_transcripts(&read_text(dir.join(files::REFERENCES))?)? {
            let emissions = EmissionMatrix::load(&read_file(
                dir.join("emissions").join(format!("{id}.ctce")),
            )?)?;
            let posteriors = PhonePosteriorMatrix::load(&read_file(
                dir.join("posteriors").join(format!("{id}.ctcp")),
            )?)?;
            let has_entity = words.iter().any(|w| entity_words.contains(w.as_str()));
            utterances.push(SyntheticUtterance {
                id,
                words,
                emissions,
                posteriors,
                has_entity,
            });
        }
        Ok(Self {
            vocab,
            phones,
            lexicon,
            catalog,
            g2g,
            lm_arpa,
            frequencies,
            utterances,
        })
    }
}

/// File names inside a corpus directory.
pub mod files {
    pub const VOCAB: &str = "vocab.txt";
    pub const PHONES: &str = "phones.txt";
    pub const LEXICON: &str = "lexicon.txt";
    pub const CATALOG: &str = "catalog.txt";
    pub const G2G: &str = "g2g.txt";
    pub const LM: &str = "lm.arpa";
    pub const FREQUENCIES: &str = "freq.txt";
    pub const REFERENCES: &str = "ref.txt";
}

/// Parses `id word word ...` lines. Blank lines are skipped; an id alone is
/// an empty transcript.
pub fn parse_transcripts(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        if !seen.insert(id.to_string()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate utterance id {id:?}"),
            });
        }
        out.push((id.to_string(), fields.map(String::from).collect()));
    }
    Ok(out)
}

fn common_sentence(rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>) -> Vec<String> {
    let n = rng.gen_range(len);
    (0..n)
        .map(|_| COMMON_WORDS.choose(rng).unwrap().to_string())
        .collect()
}

/// Pronounceable names of two or three syllables, distinct from each other
/// and from the common words, without doubled letters.
fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen: HashSet<String> = COMMON_WORDS.iter().map(|w| w.to_string()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if rng.gen_bool(0.5) {
            w.push_str(["n", "r", "s", "l"].choose(rng).unwrap());
        }
        let doubled = w.as_bytes().windows(2).any(|p| p[0] == p[1]);
        if !doubled && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Absolute-discounting bigram model with backoff to unigrams, as ARPA text.
fn bigram_arpa(sentences: &[Vec<String>]) -> String {
    const DISCOUNT: f64 = 0.5;
    let mut uni: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bi: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for s in sentences {
        let toks: Vec<&str> = std::iter::once(BOS)
            .chain(s.iter().map(String::as_str))
            .chain(std::iter::once(EOS))
            .collect();
        for &t in &toks[1..] {
            *uni.entry(t).or_insert(0.0) += 1.0;
        }
        for p in toks.windows(2) {
            *bi.entry(p[0]).or_default().entry(p[1]).or_insert(0.0) += 1.0;
        }
    }
    // one pseudo-count of <unk> keeps unseen words scorable
    *uni.entry(UNK).or_insert(0.0) += 1.0;
    let total: f64 = uni.values().sum();
    let p_uni = |w: &str| uni.get(w).copied().unwrap_or(0.0) / total;

    let mut uni_lines = Vec::new();
    let mut bi_lines = Vec::new();
    let mut words: Vec<&str> = uni.keys().copied().collect();
    words.push(BOS);
    words.sort_unstable();
    words.dedup();
    for &h in &words {
        let backoff = bi.get(h).map(|next| {
            let c_h: f64 = next.values().sum();
            let mut kept = 0.0;
            let mut covered = 0.0;
            for (&w, &c) in next {
                let p = (c - DISCOUNT) / c_h + DISCOUNT * next.len() as f64 / c_h * p_uni(w);
                bi_lines.push(format!("{:.6}\t{h} {w}", p.log10()));
                kept += p;
                covered += p_uni(w);
            }
            (1.0 - kept) / (1.0 - covered)
        });
        let prob = if h == BOS { -99.0 } else { p_uni(h).log10() };
        match backoff {
            Some(b) => uni_lines.push(format!("{prob:.6}\t{h}\t{:.6}", b.log10())),
            None => uni_lines.push(format!("{prob:.6}\t{h}")),
        }
    }
    let mut out = String::from("\\data\\\n");
    writeln!(out, "ngram 1={}", uni_lines.len()).unwrap();
    writeln!(out, "ngram 2={}", bi_lines.len()).unwrap();
    out.push_str("\n\\1-grams:\n");
    for l in uni_lines {
        writeln!(out, "{l}").unwrap();
    }
    out.push_str("\n\\2-grams:\n");
    for l in bi_lines {
        writeln!(out, "{l}").unwrap();
    }
    out.push_str("\n\\end\\\n");
    out
}

struct Builder<'a> {
    vocab: &'a SubwordVocab,
    phones: &'a PhoneSet,
    config: &'a FixtureConfig,
}

/// Target probabilities for the leading candidates of one frame; the rest
/// of the mass is spread at random over every other piece.
struct Frame {
    top: Vec<(u32, f64)>,
}

impl Builder<'_> {
    fn piece(&self, s: &str) -> u32 {
        self.vocab
            .id(s)
            .unwrap_or_else(|| panic!("fixture piece {s:?} missing"))
    }

    fn letter_piece(&self, letter: &str, initial: bool) -> u32 {
        if initial {
            self.piece(&format!("{WORD_START}{letter}"))
        } else {
            self.piece(letter)
        }
    }

    fn crisp(&self, id: u32, rng: &mut ChaCha8Rng) -> Frame {
        Frame {
            top: vec![(id, rng.gen_range(0.85..0.95))],
        }
    }

    /// `truth` at rank 2 behind `top`, trailing it by a random gap.
    fn planted(&self, top: u32, truth: u32, rng: &mut ChaCha8Rng) -> Frame {
        let gap = rng.gen_range(self.config.min_gap..=self.config.max_gap);
        let mass = rng.gen_range(0.85..0.95);
        let p_top = mass / (1.0 + (-gap).exp());
        Frame {
            top: vec![(top, p_top), (truth, mass - p_top)],
        }
    }

    fn row(&self, frame: &Frame, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v = self.vocab.len();
        let lead: f64 = frame.top.iter().map(|&(_, p)| p).sum();
        let floor = frame
            .top
            .iter()
            .map(|&(_, p)| p)
            .fold(f64::INFINITY, f64::min);
        let mut row: Vec<f64> = (0..v).map(|_| rng.gen_range(0.1..1.0)).collect();
        for &(id, _) in &frame.top {
            row[id as usize] = 0.0;
        }
        let rest: f64 = row.iter().sum();
        // keep every filler below the planted candidates
        let scale = ((1.0 - lead) / rest).min(0.5 * floor);
        for x in row.iter_mut() {
            *x *= scale;
        }
        for &(id, p) in &frame.top {
            row[id as usize] = p;
        }
        let z: f64 = row.iter().sum();
        row.iter().map(|x| x / z).collect()
    }

    fn posterior_row(&self, phone: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.phones.len();
        let mut row: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
        row[phone as usize] = 0.0;
        let rest: f64 = row.iter().sum();
        let hot = rng.gen_range(0.75..0.95);
        for x in row.iter_mut() {
            *x *= (1.0 - hot) / rest;
        }
        row[phone as usize] = hot;
        row
    }

    /// Emissions at the low frame rate and posteriors at twice that rate.
    /// Each word takes one low-rate frame per letter and words are separated
    /// by one silent frame.
    fn render(
        &self,
        words: &[String],
        entity: Option<(usize, bool)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(EmissionMatrix, PhonePosteriorMatrix)> {
        let blank = self.vocab.blank_id();
        let sil = self.phones.silence_id();
        let mut frames: Vec<Frame> = Vec::new();
        let mut phone_track: Vec<u32> = Vec::new();
        let silent = |frames: &mut Vec<Frame>, track: &mut Vec<u32>, rng: &mut ChaCha8Rng| {
            frames.push(self.crisp(blank, rng));
            track.push(sil);
        };
        silent(&mut frames, &mut phone_track, rng);
        for (w, word) in words.iter().enumerate() {
            let letters: Vec<String> = word.chars().map(String::from).collect();
            for l in &letters {
                phone_track.push(self.phones.id(l).unwrap());
            }
            match entity {
                Some((pos, deletion)) if pos == w => {
                    // misspell one or two letters, or hide every letter under blank
                    let confusable: Vec<usize> = (0..letters.len())
                        .filter(|&i| confusion(&letters[i]).is_some())
                        .collect();
                    let n_sub = rng.gen_range(1..=2).min(confusable.len().max(1));
                    let subs: Vec<usize> = if confusable.is_empty() {
                        vec![rng.gen_range(0..letters.len())]
                    } else {
                        confusable.choose_multiple(rng, n_sub).copied().collect()
                    };
                    for (i, l) in letters.iter().enumerate() {
                        let truth = self.letter_piece(l, i == 0);
                        let frame = if deletion {
                            self.planted(blank, truth, rng)
                        } else if subs.contains(&i) {
                            let other = confusion(l).map(String::from).unwrap_or_else(|| {
                                let mut c = ('a'..='z').map(String::from).collect::<Vec<_>>();
                                c.retain(|x| x != l);
                                c.choose(rng).unwrap().clone()
                            });
                            self.planted(self.letter_piece(&other, i == 0), truth, rng)
                        } else {
                            self.crisp(truth, rng)
                        };
                        frames.push(frame);
                    }
                }
                _ => {
                    let id = self.piece(&format!("{WORD_START}{word}"));
                    let frame = if rng.gen_bool(self.config.confusion_rate) {
                        let mut other = *COMMON_WORDS.choose(rng).unwrap();
                        while other == word {
                            other = COMMON_WORDS.choose(rng).unwrap();
                        }
                        self.planted(self.piece(&format!("{WORD_START}{other}")), id, rng)
                    } else {
                        self.crisp(id, rng)
                    };
                    frames.push(frame);
                    for _ in 1..letters.len() {
                        frames.push(self.crisp(blank, rng));
                    }
                }
            }
            silent(&mut frames, &mut phone_track, rng);
        }
        let rows: Vec<Vec<f64>> = frames.iter().map(|f| self.row(f, rng)).collect();
        let emissions = EmissionMatrix::from_prob_rows(&rows)?;
        let post_rows: Vec<Vec<f64>> = phone_track
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, UPSAMPLE as usize))
            .map(|p| self.posterior_row(p, rng))
            .collect();
        let posteriors = PhonePosteriorMatrix::from_rows(&post_rows, UPSAMPLE)?;
        Ok((emissions, posteriors))
    }
}

fn confusion(letter: &str) -> Option<&'static str> {
    CONFUSIONS.iter().find_map(|&(a, b)| {
        if a == letter {
            Some(b)
        } else if b == letter {
            Some(a)
        } else {
            None
        }
    })
}
