//! Contextual adapter: attention from intermediate encoder layers over
//! embeddings of catalog entities, added to the top-layer representation.
//!
//! Entity embeddings come from a bidirectional LSTM over piece embeddings;
//! the final states of both directions are concatenated. A learned no-bias
//! row is always appended to the catalog, and frames that attend to it most
//! can be forced to receive no bias at all.

mod ctc_loss;
mod encoder;
mod lstm;
mod train;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use ctc_loss::{ctc_loss, CtcLoss};
pub use encoder::{default_taps, EncoderOutput, SyntheticEncoder};
pub use lstm::Lstm;
pub use train::{
    attention_accuracy, make_rare_training_set, rare_vocabulary, train_adapter, CatalogSchedule,
    RareExample, ToyTask, ToyTaskConfig, ToyUtterance, TrainConfig, TrainReport,
};

use crate::catalog::EntityCatalog;
use crate::error::{Error, Result};
use crate::tokenizer::segment_phrase;
use crate::vocab::SubwordVocab;

pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_ATTN_DIM: usize = 128;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterDims {
    /// Rows of the piece embedding table.
    pub vocab: usize,
    /// Catalog embedding size; each LSTM direction has `dim / 2` units.
    pub dim: usize,
    pub attn_dim: usize,
    pub taps: usize,
}

/// Trainable adapter weights. Vectors are stored as single-column matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub embedding: DMatrix<f64>,
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub no_bias: DMatrix<f64>,
    pub tap_weights: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

const TENSOR_NAMES: [&str; 12] = [
    "embedding",
    "fwd.w",
    "fwd.u",
    "fwd.b",
    "bwd.w",
    "bwd.u",
    "bwd.b",
    "no_bias",
    "tap_weights",
    "w_q",
    "w_k",
    "w_v",
];

impl AdapterParams {
    pub fn zeros(dims: AdapterDims) -> Result<Self> {
        if dims.dim == 0 || !dims.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "adapter dim must be positive and even, got {}",
                dims.dim
            )));
        }
        if dims.vocab == 0 || dims.attn_dim == 0 || dims.taps == 0 {
            return Err(Error::Config("adapter dims must be positive".into()));
        }
        let (d, h, a) = (dims.dim, dims.dim / 2, dims.attn_dim);
        Ok(Self {
            embedding: DMatrix::zeros(dims.vocab, d),
            fwd: Lstm::zeros(d, h),
            bwd: Lstm::zeros(d, h),
            no_bias: DMatrix::zeros(d, 1),
            tap_weights: DMatrix::zeros(dims.taps, 1),
            w_q: DMatrix::zeros(a, d),
            w_k: DMatrix::zeros(a, d),
            w_v: DMatrix::zeros(d, d),
        })
    }

    /// Every weight drawn from uniform(-0.1, 0.1).
    pub fn init(dims: AdapterDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-0.1..0.1));
        }
        Ok(p)
    }

    pub fn dims(&self) -> AdapterDims {
        AdapterDims {
            vocab: self.embedding.nrows(),
            dim: self.embedding.ncols(),
            attn_dim: self.w_q.nrows(),
            taps: self.tap_weights.nrows(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims()).expect("existing dims are valid")
    }

    pub fn tensors(&self) -> [(&'static str, &DMatrix<f64>); 12] {
        [
            (TENSOR_NAMES[0], &self.embedding),
            (TENSOR_NAMES[1], &self.fwd.w),
            (TENSOR_NAMES[2], &self.fwd.u),
            (TENSOR_NAMES[3], &self.fwd.b),
            (TENSOR_NAMES[4], &self.bwd.w),
            (TENSOR_NAMES[5], &self.bwd.u),
            (TENSOR_NAMES[6], &self.bwd.b),
            (TENSOR_NAMES[7], &self.no_bias),
            (TENSOR_NAMES[8], &self.tap_weights),
            (TENSOR_NAMES[9], &self.w_q),
            (TENSOR_NAMES[10], &self.w_k),
            (TENSOR_NAMES[11], &self.w_v),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut DMatrix<f64>); 12] {
        [
            (TENSOR_NAMES[0], &mut self.embedding),
            (TENSOR_NAMES[1], &mut self.fwd.w),
            (TENSOR_NAMES[2], &mut self.fwd.u),
            (TENSOR_NAMES[3], &mut self.fwd.b),
            (TENSOR_NAMES[4], &mut self.bwd.w),
            (TENSOR_NAMES[5], &mut self.bwd.u),
            (TENSOR_NAMES[6], &mut self.bwd.b),
            (TENSOR_NAMES[7], &mut self.no_bias),
            (TENSOR_NAMES[8], &mut self.tap_weights),
            (TENSOR_NAMES[9], &mut self.w_q),
            (TENSOR_NAMES[10], &mut self.w_k),
            (TENSOR_NAMES[11], &mut self.w_v),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Versioned little-endian checkpoint: magic, version, tensor count, then
    /// per tensor its name, rank, dims and row-major f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(TENSOR_NAMES.len() as u32).to_le_bytes());
        for (name, t) in self.tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims: Vec<usize> = if t.ncols() == 1 {
                vec![t.nrows()]
            } else {
                vec![t.nrows(), t.ncols()]
            };
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out.extend_from_slice(&(t[(r, c)] as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = rd.u32()? as usize;
        let mut tensors: HashMap<String, DMatrix<f64>> = HashMap::new();
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|e| Error::Config(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = rd.u32()? as usize;
            let dims = (0..rank)
                .map(|_| rd.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [r] => (*r, 1),
                [r, c] => (*r, *c),
                _ => return Err(Error::Shape(format!("tensor {name} has rank {rank}"))),
            };
            let raw = rd.take(rows * cols * 4)?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, DMatrix::from_row_slice(rows, cols, &values));
        }
        let get = |n: &str| {
            tensors
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {n}")))
        };
        let embedding = get("embedding")?;
        let dims = AdapterDims {
            vocab: embedding.nrows(),
            dim: embedding.ncols(),
            attn_dim: get("w_q")?.nrows(),
            taps: get("tap_weights")?.nrows(),
        };
        let mut p = Self::zeros(dims)?;
        for (name, slot) in p.tensors_mut() {
            let t = get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name} is {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(p)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Entity embeddings with the no-bias row last.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogCache {
    pub embeddings: DMatrix<f64>,
    pub catalog_hash: u64,
}

impl CatalogCache {
    pub fn rows(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn no_bias_row(&self) -> usize {
        self.rows() - 1
    }
}

struct EntityTape {
    fwd: Vec<lstm::Step>,
    bwd: Vec<lstm::Step>,
    pieces: Vec<u32>,
}

fn encode_entity(pieces: &[u32], params: &AdapterParams) -> (DVector<f64>, EntityTape) {
    let xs: Vec<DVector<f64>> = pieces
        .iter()
        .map(|&p| params.embedding.row(p as usize).transpose())
        .collect();
    let (h_f, fwd) = params.fwd.forward(&xs);
    let rev: Vec<DVector<f64>> = xs.iter().rev().cloned().collect();
    let (h_b, bwd) = params.bwd.forward(&rev);
    let h = h_f.len();
    let mut c = DVector::zeros(2 * h);
    c.rows_mut(0, h).copy_from(&h_f);
    c.rows_mut(h, h).copy_from(&h_b);
    (
        c,
        EntityTape {
            fwd,
            bwd,
            pieces: pieces.to_vec(),
        },
    )
}

fn encode_piece_lists(
    entities: &[Vec<u32>],
    params: &AdapterParams,
) -> Result<(DMatrix<f64>, Vec<EntityTape>)> {
    let d = params.dims().dim;
    let mut rows = DMatrix::zeros(entities.len() + 1, d);
    let mut tapes = Vec::with_capacity(entities.len());
    for (j, pieces) in entities.iter().enumerate() {
        if let Some(&bad) = pieces
            .iter()
            .find(|&&p| p as usize >= params.embedding.nrows())
        {
            return Err(Error::LabelOutOfRange {
                id: bad as usize,
                vocab: params.embedding.nrows(),
            });
        }
        let (c, tape) = encode_entity(pieces, params);
        rows.row_mut(j).copy_from(&c.transpose());
        tapes.push(tape);
    }
    rows.row_mut(entities.len())
        .copy_from(&params.no_bias.column(0).transpose());
    Ok((rows, tapes))
}

/// Embeds already-segmented entities and appends the no-bias row.
pub fn encode_pieces(
    entities: &[Vec<u32>],
    params: &AdapterParams,
    hash: u64,
) -> Result<CatalogCache> {
    Ok(CatalogCache {
        embeddings: encode_piece_lists(entities, params)?.0,
        catalog_hash: hash,
    })
}

/// Segments each entity greedily and embeds it.
pub fn encode_catalog(
    catalog: &EntityCatalog,
    vocab: &SubwordVocab,
    params: &AdapterParams,
) -> Result<CatalogCache> {
    let pieces = catalog
        .entities()
        .iter()
        .map(|e| segment_phrase(e, vocab))
        .collect::<Result<Vec<_>>>()?;
    encode_pieces(&pieces, params, catalog.content_hash())
}

/// Encodes each distinct catalog once for a fixed parameter set.
#[derive(Debug, Default)]
pub struct CatalogCacheStore {
    caches: HashMap<u64, CatalogCache>,
    builds: usize,
}

impl CatalogCacheStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_encode(
        &mut self,
        catalog: &EntityCatalog,
        vocab: &SubwordVocab,
        params: &AdapterParams,
    ) -> Result<&CatalogCache> {
        let key = catalog.content_hash();
        if !self.caches.contains_key(&key) {
            let cache = encode_catalog(catalog, vocab, params)?;
            self.builds += 1;
            self.caches.insert(key, cache);
        }
        Ok(&self.caches[&key])
    }

    /// Number of catalog encodings performed so far.
    pub fn builds(&self) -> usize {
        self.builds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasingOutput {
    /// Per-frame bias, frames as rows.
    pub bias: DMatrix<f64>,
    /// Per-frame attention over catalog rows.
    pub attention: DMatrix<f64>,
    /// Frames whose bias was forced to zero.
    pub suppressed: Vec<bool>,
}

impl BiasingOutput {
    /// Adds the bias to `top`, leaving suppressed frames bit-for-bit intact.
    pub fn apply(&self, top: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = top.clone();
        for t in 0..out.nrows() {
            if !self.suppressed[t] {
                let b = self.bias.row(t).into_owned();
                out.row_mut(t)
                    .iter_mut()
                    .zip(b.iter())
                    .for_each(|(o, b)| *o += b);
            }
        }
        out
    }
}

/// Elementwise `e + b`.
pub fn apply_bias(e: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if e.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", e.shape(), b.shape())));
    }
    Ok(e + b)
}

struct AttentionTape {
    q: DMatrix<f64>,
    queries: DMatrix<f64>,
    keys: DMatrix<f64>,
    values: DMatrix<f64>,
    attention: DMatrix<f64>,
}

fn attend(q: DMatrix<f64>, catalog: &DMatrix<f64>, params: &AdapterParams) -> AttentionTape {
    let scale = 1.0 / (params.w_q.nrows() as f64).sqrt();
    let queries = &q * params.w_q.transpose();
    let keys = catalog * params.w_k.transpose();
    let values = catalog * params.w_v.transpose();
    let mut attention = (&queries * keys.transpose()) * scale;
    for mut row in attention.row_iter_mut() {
        let m = row.max();
        row.iter_mut().for_each(|x| *x = (*x - m).exp());
        let z = row.sum();
        row /= z;
    }
    AttentionTape {
        q,
        queries,
        keys,
        values,
        attention,
    }
}

fn finish(tape: &AttentionTape, enforce_no_bias: bool) -> BiasingOutput {
    let mut bias = &tape.attention * &tape.values;
    let k = tape.attention.ncols();
    let suppressed: Vec<bool> = tape
        .attention
        .row_iter()
        .map(|row| enforce_no_bias && argmax(row.iter().copied()) == k - 1)
        .collect();
    for (t, &s) in suppressed.iter().enumerate() {
        if s {
            bias.row_mut(t).fill(0.0);
        }
    }
    BiasingOutput {
        bias,
        attention: tape.attention.clone(),
        suppressed,
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in values.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn mix_taps(taps: &[DMatrix<f64>], params: &AdapterParams) -> Result<DMatrix<f64>> {
    let dims = params.dims();
    if taps.len() != dims.taps {
        return Err(Error::Shape(format!(
            "{} encoder taps for {} mixing weights",
            taps.len(),
            dims.taps
        )));
    }
    let t_max = taps[0].nrows();
    if taps.iter().any(|e| e.shape() != (t_max, dims.dim)) {
        return Err(Error::Shape(format!(
            "every tap must be {t_max}x{} frames by dim",
            dims.dim
        )));
    }
    let mut q = DMatrix::zeros(t_max, dims.dim);
    for (w, e) in params.tap_weights.iter().zip(taps) {
        q += e * *w;
    }
    Ok(q)
}

/// Attention from the mixed tap outputs over the cached catalog.
///
/// The argmax used for no-bias enforcement takes the lowest index on ties,
/// so a frame is suppressed only when no-bias is the strict maximum.
pub fn biasing_forward(
    taps: &[DMatrix<f64>],
    cache: &CatalogCache,
    params: &AdapterParams,
    enforce_no_bias: bool,
) -> Result<BiasingOutput> {
    if cache.embeddings.ncols() != params.dims().dim {
        return Err(Error::Shape("catalog dim differs from adapter dim".into()));
    }
    let q = mix_taps(taps, params)?;
    Ok(finish(
        &attend(q, &cache.embeddings, params),
        enforce_no_bias,
    ))
}

/// Variant that queries with the top layer alone.
pub fn biasing_forward_top_layer(
    top: &DMatrix<f64>,
    cache: &CatalogCache,
    params: &AdapterParams,
    enforce_no_bias: bool,
) -> Result<BiasingOutput> {
    if top.ncols() != params.dims().dim || cache.embeddings.ncols() != params.dims().dim {
        return Err(Error::Shape(
            "top layer or catalog dim differs from adapter dim".into(),
        ));
    }
    Ok(finish(
        &attend(top.clone(), &cache.embeddings, params),
        enforce_no_bias,
    ))
}

/// Training objective `alpha * CTC` for one utterance and its gradient with
/// respect to every adapter weight. The encoder stays frozen and no-bias
/// enforcement is off, so the objective is smooth.
pub fn adapter_loss_and_grad(
    params: &AdapterParams,
    encoder: &SyntheticEncoder,
    encoded: &EncoderOutput,
    labels: &[u32],
    catalog: &[Vec<u32>],
    alpha: f64,
) -> Result<(f64, AdapterParams)> {
    let blank = (encoder.vocab_size() - 1) as u32;
    let (catalog_rows, tapes) = encode_piece_lists(catalog, params)?;
    let q = mix_taps(&encoded.taps, params)?;
    let tape = attend(q, &catalog_rows, params);
    let bias = &tape.attention * &tape.values;
    let logits = encoder.logits(&(&encoded.top + &bias));
    let ctc = ctc_loss(&logits, labels, blank);
    let mut grad = params.zeros_like();
    if !ctc.feasible {
        return Ok((f64::INFINITY, grad));
    }

    let d_bias = &ctc.grad * encoder.head_w() * alpha;
    let d_attention = &d_bias * tape.values.transpose();
    let d_values = tape.attention.transpose() * &d_bias;
    let mut d_scores = tape.attention.component_mul(&d_attention);
    for (t, mut row) in d_scores.row_iter_mut().enumerate() {
        let total: f64 = row.sum();
        for (j, x) in row.iter_mut().enumerate() {
            *x -= tape.attention[(t, j)] * total;
        }
    }
    let scale = 1.0 / (params.w_q.nrows() as f64).sqrt();
    d_scores *= scale;
    let d_queries = &d_scores * &tape.keys;
    let d_keys = d_scores.transpose() * &tape.queries;

    grad.w_q = d_queries.transpose() * &tape.q;
    let d_q = &d_queries * &params.w_q;
    for (w, e) in grad.tap_weights.iter_mut().zip(&encoded.taps) {
        *w = d_q.component_mul(e).sum();
    }
    grad.w_k = d_keys.transpose() * &catalog_rows;
    grad.w_v = d_values.transpose() * &catalog_rows;
    let d_catalog = &d_keys * &params.w_k + &d_values * &params.w_v;

    let (k, k_dim) = catalog_rows.shape();
    grad.no_bias = DMatrix::from_iterator(k_dim, 1, d_catalog.row(k - 1).iter().copied());
    let h = params.fwd.hidden();
    for (j, et) in tapes.iter().enumerate() {
        let dc = d_catalog.row(j).transpose();
        let dh_f: DVector<f64> = dc.rows(0, h).into_owned();
        let dh_b: DVector<f64> = dc.rows(h, h).into_owned();
        let dx_f = params.fwd.backward(&et.fwd, &dh_f, &mut grad.fwd);
        let dx_b = params.bwd.backward(&et.bwd, &dh_b, &mut grad.bwd);
        let n = et.pieces.len();
        for (s, &p) in et.pieces.iter().enumerate() {
            let dx = &dx_f[s] + &dx_b[n - 1 - s];
            let mut row = grad.embedding.row_mut(p as usize);
            row += dx.transpose();
        }
    }
    Ok((alpha * ctc.loss, grad))
}
