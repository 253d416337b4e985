use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    adapter_loss_and_grad, biasing_forward, encode_pieces, AdapterParams, SyntheticEncoder,
};
use crate::adapter::EncoderOutput;
use crate::error::{Error, Result};
use crate::tokenizer::segment_phrase;
use crate::vocab::{SubwordVocab, WORD_START};

/// Words occurring fewer than `threshold` times, sorted.
pub fn rare_vocabulary<S: AsRef<str>>(transcripts: &[Vec<S>], threshold: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for utt in transcripts {
        for w in utt {
            *counts.entry(w.as_ref()).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c < threshold)
        .map(|(w, _)| w.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RareExample {
    pub utterance: usize,
    /// Rare words spoken in the utterance, in order of first occurrence.
    pub rare: Vec<String>,
    /// The rare words plus distractors, shuffled.
    pub entities: Vec<String>,
}

/// One example per utterance containing a rare word. Its entity list holds
/// those rare words plus up to `distractors` other rare words.
pub fn make_rare_training_set<S: AsRef<str>>(
    transcripts: &[Vec<S>],
    threshold: usize,
    distractors: usize,
    seed: u64,
) -> Vec<RareExample> {
    let vocab = rare_vocabulary(transcripts, threshold);
    let rare_set: HashSet<&str> = vocab.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (u, utt) in transcripts.iter().enumerate() {
        let mut rare: Vec<String> = Vec::new();
        for w in utt {
            let w = w.as_ref();
            if rare_set.contains(w) && !rare.iter().any(|r| r == w) {
                rare.push(w.to_string());
            }
        }
        if rare.is_empty() {
            continue;
        }
        let pool: Vec<&String> = vocab.iter().filter(|w| !rare.contains(w)).collect();
        let mut entities = rare.clone();
        entities.extend(
            pool.choose_multiple(&mut rng, distractors.min(pool.len()))
                .map(|w| w.to_string()),
        );
        entities.shuffle(&mut rng);
        out.push(RareExample {
            utterance: u,
            rare,
            entities,
        });
    }
    out
}

/// Catalog size per epoch: `start + step * epoch`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatalogSchedule {
    pub start: usize,
    pub step: usize,
    pub cap: usize,
}

impl Default for CatalogSchedule {
    fn default() -> Self {
        Self {
            start: 30,
            step: 4,
            cap: 250,
        }
    }
}

impl CatalogSchedule {
    pub fn size(&self, epoch: usize) -> usize {
        (self.start + self.step * epoch).min(self.cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the CTC loss; the remaining `1 - alpha` weights an
    /// attention-decoder loss that is identically zero here.
    pub alpha: f64,
    /// Weight of the phone-alignment loss. Only 0 is supported.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub schedule: CatalogSchedule,
    pub rare_threshold: usize,
    /// Global gradient-norm clip per step.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            learning_rate: 0.01,
            epochs: 20,
            schedule: CatalogSchedule::default(),
            rare_threshold: 13,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("alpha and beta must lie in [0, 1]".into()));
        }
        if self.beta != 0.0 {
            return Err(Error::Config(
                "phone-alignment loss is not trained; beta must be 0".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning rate must be >= 0 and clip norm > 0".into(),
            ));
        }
        if self.schedule.start == 0 {
            return Err(Error::Config("catalog schedule must start above 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: AdapterParams,
    /// Mean loss over the rare set before the first update, with catalogs
    /// of the starting size.
    pub initial_loss: f64,
    /// The same measurement after training.
    pub final_loss: f64,
    /// Running mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: AdapterParams,
    v: AdapterParams,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &AdapterParams) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut AdapterParams, grad: &AdapterParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(ms.into_iter().zip(vs))
        {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn clip(grad: &mut AdapterParams, max_norm: f64) {
    let norm: f64 = grad
        .tensors()
        .iter()
        .map(|(_, t)| t.norm_squared())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for (_, t) in grad.tensors_mut() {
            *t *= max_norm / norm;
        }
    }
}

fn segment_all(words: &[String], vocab: &SubwordVocab) -> Result<Vec<Vec<u32>>> {
    words.iter().map(|w| segment_phrase(w, vocab)).collect()
}

fn mean_loss(
    params: &AdapterParams,
    encoder: &SyntheticEncoder,
    encoded: &[EncoderOutput],
    data: &[ToyUtterance],
    examples: &[RareExample],
    vocab: &SubwordVocab,
    alpha: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let cat = segment_all(&ex.entities, vocab)?;
        let (l, _) = adapter_loss_and_grad(
            params,
            encoder,
            &encoded[ex.utterance],
            &data[ex.utterance].labels,
            &cat,
            alpha,
        )?;
        total += l;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains adapter weights on the rare-word subset of `data`, one utterance
/// per step with Adam. The encoder is only read.
pub fn train_adapter(
    encoder: &SyntheticEncoder,
    data: &[ToyUtterance],
    vocab: &SubwordVocab,
    init: AdapterParams,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let encoded = data
        .iter()
        .map(|u| encoder.encode(&u.features))
        .collect::<Result<Vec<_>>>()?;
    let transcripts: Vec<Vec<String>> = data.iter().map(|u| u.words.clone()).collect();
    let probe = make_rare_training_set(
        &transcripts,
        config.rare_threshold,
        config.schedule.start - 1,
        config.seed,
    );
    if probe.is_empty() {
        return Err(Error::Config("no utterance contains a rare word".into()));
    }
    let measure =
        |p: &AdapterParams| mean_loss(p, encoder, &encoded, data, &probe, vocab, config.alpha);
    let initial_loss = measure(&init)?;

    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let size = config.schedule.size(epoch);
        let mut examples = make_rare_training_set(
            &transcripts,
            config.rare_threshold,
            size - 1,
            config.seed.wrapping_add(epoch as u64 + 1),
        );
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        for ex in &examples {
            let cat = segment_all(&ex.entities, vocab)?;
            let (loss, mut grad) = adapter_loss_and_grad(
                &params,
                encoder,
                &encoded[ex.utterance],
                &data[ex.utterance].labels,
                &cat,
                config.alpha,
            )?;
            if loss.is_nan() || !grad.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            if loss.is_infinite() {
                continue;
            }
            clip(&mut grad, config.clip_norm);
            adam.update(&mut params, &grad, config.learning_rate);
            total += loss;
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    let final_loss = measure(&params)?;
    Ok(TrainReport {
        params,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

/// Fraction of rare-word frames on which the spoken entity receives more
/// attention than the no-bias row. Each utterance gets a catalog of its rare
/// words plus distractors from `rare_vocab`, `catalog_size` entries in all.
pub fn attention_accuracy(
    params: &AdapterParams,
    encoder: &SyntheticEncoder,
    data: &[ToyUtterance],
    vocab: &SubwordVocab,
    rare_vocab: &[String],
    catalog_size: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut total) = (0usize, 0usize);
    for utt in data {
        for (w, word) in utt.words.iter().enumerate() {
            if !utt.degraded[w] {
                continue;
            }
            let pool: Vec<&String> = rare_vocab.iter().filter(|r| *r != word).collect();
            let mut entities = vec![word.clone()];
            entities.extend(
                pool.choose_multiple(&mut rng, catalog_size.saturating_sub(1).min(pool.len()))
                    .map(|s| s.to_string()),
            );
            entities.shuffle(&mut rng);
            let truth = entities.iter().position(|e| e == word).unwrap();
            let cache = encode_pieces(&segment_all(&entities, vocab)?, params, 0)?;
            let out = biasing_forward(&encoder.encode(&utt.features)?.taps, &cache, params, false)?;
            let nb = cache.no_bias_row();
            let (s, e) = utt.word_frames[w];
            for t in s..e {
                total += 1;
                if out.attention[(t, truth)] > out.attention[(t, nb)] {
                    correct += 1;
                }
            }
        }
    }
    Ok((correct as f64 / total.max(1) as f64, total))
}

/// Settings for the synthetic adapter task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskConfig {
    /// Letters besides the word-start piece; the vocabulary is letters + 2.
    pub letters: usize,
    pub dim: usize,
    pub layers: usize,
    pub train_utterances: usize,
    pub held_out_utterances: usize,
    pub common_words: usize,
    pub rare_words: usize,
    pub frames_per_piece: usize,
    pub noise: f64,
    /// Share of the "mumble" prototype mixed into rare-word frames, whose
    /// letter content is also averaged with the pair partner.
    pub degradation: f64,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            letters: 6,
            dim: 16,
            layers: 4,
            train_utterances: 50,
            held_out_utterances: 30,
            common_words: 6,
            rare_words: 40,
            frames_per_piece: 2,
            noise: 0.2,
            degradation: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub words: Vec<String>,
    pub labels: Vec<u32>,
    /// Input features, frames as rows.
    pub features: DMatrix<f64>,
    /// Half-open frame spans of each word's pieces.
    pub word_frames: Vec<(usize, usize)>,
    /// Words whose frames were acoustically degraded.
    pub degraded: Vec<bool>,
}

/// Synthetic world for the adapter: frame features are noisy per-piece
/// prototypes, and a frozen encoder with a regression-fitted CTC head sits
/// on top. In rare words each letter is blurred with its pair partner and
/// mixed with a shared "mumble" prototype, so acoustics alone cannot tell
/// `a` from `b` there; the catalog can.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub config: ToyTaskConfig,
    pub vocab: SubwordVocab,
    pub encoder: SyntheticEncoder,
    pub common: Vec<String>,
    pub rare_pool: Vec<String>,
    pub train: Vec<ToyUtterance>,
    pub held_out: Vec<ToyUtterance>,
}

struct World {
    prototypes: DMatrix<f64>,
    mumble: Vec<f64>,
    noise: Normal<f64>,
}

impl ToyTask {
    pub fn generate(config: &ToyTaskConfig) -> Result<Self> {
        if config.letters == 0 || config.letters > 26 || config.frames_per_piece == 0 {
            return Err(Error::Config(
                "toy task needs 1..=26 letters and frames per piece".into(),
            ));
        }
        let letters: Vec<char> = ('a'..='z').take(config.letters).collect();
        let mut pieces = vec![WORD_START.to_string()];
        pieces.extend(letters.iter().map(|c| c.to_string()));
        let vocab = SubwordVocab::with_blank(&pieces)?;
        let v = vocab.len();
        let d = config.dim;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let world = World {
            prototypes: DMatrix::from_fn(v, d, |_, _| unit.sample(&mut rng)),
            mumble: (0..d).map(|_| unit.sample(&mut rng)).collect(),
            noise: Normal::new(0.0, config.noise.max(1e-12)).unwrap(),
        };

        let mut seen = HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>| loop {
            let n = rng.gen_range(len.clone());
            let w: String = (0..n).map(|_| *letters.choose(rng).unwrap()).collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let common: Vec<String> = (0..config.common_words)
            .map(|_| word(&mut rng, 2..=2))
            .collect();
        let rare_pool: Vec<String> = (0..config.rare_words)
            .map(|_| word(&mut rng, 3..=4))
            .collect();

        let mut encoder = SyntheticEncoder::random(d, config.layers, v, 1.0, config.seed ^ 0xe1c0)?;
        let head_data: Vec<(DMatrix<f64>, Vec<u32>)> = (0..200)
            .map(|_| {
                let words: Vec<String> = (0..3)
                    .map(|_| {
                        let n = rng.gen_range(2..=4);
                        (0..n).map(|_| *letters.choose(&mut rng).unwrap()).collect()
                    })
                    .collect();
                let degraded: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.25)).collect();
                let u = render(&words, &degraded, &vocab, &world, config, &mut rng)?;
                Ok((u.features, u.frame_labels))
            })
            .collect::<Result<_>>()?;
        encoder.fit_head(&head_data, 1e-2, 500)?;

        let sample = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<ToyUtterance>> {
            (0..n)
                .map(|_| {
                    let k = rng.gen_range(2..=3);
                    let mut words: Vec<String> = (0..k)
                        .map(|_| common.choose(rng).unwrap().clone())
                        .collect();
                    let pos = rng.gen_range(0..=k);
                    words.insert(pos, rare_pool.choose(rng).unwrap().clone());
                    let degraded: Vec<bool> = (0..=k).map(|i| i == pos).collect();
                    Ok(render(&words, &degraded, &vocab, &world, config, rng)?.utterance)
                })
                .collect()
        };
        let train = sample(config.train_utterances, &mut rng)?;
        let held_out = sample(config.held_out_utterances, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            encoder,
            common,
            rare_pool,
            train,
            held_out,
        })
    }

    pub fn transcripts(&self) -> Vec<Vec<String>> {
        self.train.iter().map(|u| u.words.clone()).collect()
    }
}

struct Rendered {
    utterance: ToyUtterance,
    features: DMatrix<f64>,
    frame_labels: Vec<u32>,
}

/// Letters pair up as (a, b), (c, d), ...; the word-start piece (id 0) and
/// an unpaired last letter are their own partners.
fn partner(piece: usize, letters: usize) -> usize {
    match piece {
        0 => 0,
        p if p % 2 == 1 && p < letters => p + 1,
        p if p % 2 == 1 => p,
        p => p - 1,
    }
}

/// Lays out one blank frame, then each word's pieces for
/// `frames_per_piece` frames each followed by a blank frame.
fn render(
    words: &[String],
    degraded: &[bool],
    vocab: &SubwordVocab,
    world: &World,
    config: &ToyTaskConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rendered> {
    let blank = vocab.blank_id();
    let mut frame_labels = vec![blank];
    let mut frame_degraded = vec![false];
    let mut labels = Vec::new();
    let mut word_frames = Vec::with_capacity(words.len());
    for (w, word) in words.iter().enumerate() {
        let pieces = segment_phrase(word, vocab)?;
        let start = frame_labels.len();
        for &p in &pieces {
            labels.push(p);
            for _ in 0..config.frames_per_piece {
                frame_labels.push(p);
                frame_degraded.push(degraded[w]);
            }
        }
        word_frames.push((start, frame_labels.len()));
        frame_labels.push(blank);
        frame_degraded.push(false);
    }
    let d = config.dim;
    let m = config.degradation;
    let features = DMatrix::from_fn(frame_labels.len(), d, |t, k| {
        let p = frame_labels[t] as usize;
        let x = if frame_degraded[t] {
            let blurred = 0.5
                * (world.prototypes[(p, k)] + world.prototypes[(partner(p, config.letters), k)]);
            (1.0 - m) * blurred + m * world.mumble[k]
        } else {
            world.prototypes[(p, k)]
        };
        x + world.noise.sample(rng)
    });
    Ok(Rendered {
        utterance: ToyUtterance {
            words: words.to_vec(),
            labels,
            features: features.clone(),
            word_frames,
            degraded: degraded.to_vec(),
        },
        features,
        frame_labels,
    })
}
