use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Layers tapped for the attention query: `ceil(0.3 N)`, `ceil(0.6 N)` and `N`
/// (1-based, duplicates removed).
pub fn default_taps(layers: usize) -> Vec<usize> {
    let mut taps = vec![(3 * layers).div_ceil(10), (6 * layers).div_ceil(10), layers];
    taps.retain(|&t| t >= 1);
    taps.dedup();
    taps
}

/// Frozen stand-in for a pretrained acoustic encoder.
///
/// Each layer adds `tanh(M [e_{t-1}; e_t; e_{t+1}])` to the previous layer's
/// output, with zero padding at the edges, so deeper layers see wider context. A
/// linear CTC head maps the top layer to piece logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEncoder {
    layers: Vec<DMatrix<f64>>,
    taps: Vec<usize>,
    head_w: DMatrix<f64>,
    head_b: DVector<f64>,
}

/// Layer outputs for one utterance, frames as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub taps: Vec<DMatrix<f64>>,
    pub top: DMatrix<f64>,
}

impl SyntheticEncoder {
    /// Random layers with a zero head. `gain` scales the layer weights.
    pub fn random(dim: usize, layers: usize, vocab: usize, gain: f64, seed: u64) -> Result<Self> {
        if dim == 0 || layers == 0 || vocab == 0 {
            return Err(Error::Config(
                "encoder needs positive dim, layers and vocab".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, gain / ((3 * dim) as f64).sqrt()).unwrap();
        let layers = (0..layers)
            .map(|_| DMatrix::from_fn(dim, 3 * dim, |_, _| normal.sample(&mut rng)))
            .collect::<Vec<_>>();
        Ok(Self {
            taps: default_taps(layers.len()),
            layers,
            head_w: DMatrix::zeros(vocab, dim),
            head_b: DVector::zeros(vocab),
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// All layer outputs, index 0 being layer 1.
    pub fn layer_outputs(&self, features: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let (t_max, d) = (features.nrows(), self.dim());
        let mut prev = features.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for m in &self.layers {
            let mut ctx = DMatrix::zeros(t_max, 3 * d);
            for t in 0..t_max {
                if t > 0 {
                    ctx.view_mut((t, 0), (1, d)).copy_from(&prev.row(t - 1));
                }
                ctx.view_mut((t, d), (1, d)).copy_from(&prev.row(t));
                if t + 1 < t_max {
                    ctx.view_mut((t, 2 * d), (1, d)).copy_from(&prev.row(t + 1));
                }
            }
            let next = &prev + (ctx * m.transpose()).map(f64::tanh);
            out.push(next.clone());
            prev = next;
        }
        out
    }

    pub fn encode(&self, features: &DMatrix<f64>) -> Result<EncoderOutput> {
        if features.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, encoder expects {}",
                features.ncols(),
                self.dim()
            )));
        }
        let all = self.layer_outputs(features);
        Ok(EncoderOutput {
            taps: self.taps.iter().map(|&l| all[l - 1].clone()).collect(),
            top: all.last().unwrap().clone(),
        })
    }

    /// CTC logits from a (possibly biased) top-layer representation.
    pub fn logits(&self, top: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = top * self.head_w.transpose();
        for mut row in z.row_iter_mut() {
            row += self.head_b.transpose();
        }
        z
    }

    /// Multiplies the head by `factor`, making the model more confident.
    pub fn sharpen_head(&mut self, factor: f64) {
        self.head_w *= factor;
        self.head_b *= factor;
    }

    pub(crate) fn head_w(&self) -> &DMatrix<f64> {
        &self.head_w
    }

    /// Fits the head as a frame classifier: a ridge-regression start
    /// refined by `iterations` steps of gradient descent on softmax cross
    /// entropy. Part of building the frozen model, not of training.
    pub fn fit_head(
        &mut self,
        utterances: &[(DMatrix<f64>, Vec<u32>)],
        ridge: f64,
        iterations: usize,
    ) -> Result<()> {
        let (d, v) = (self.dim(), self.vocab_size());
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (features, frame_labels) in utterances {
            let top = self.encode(features)?.top;
            for (t, &label) in frame_labels.iter().enumerate() {
                rows.extend(top.row(t).iter().copied());
                rows.push(1.0);
                labels.push(label as usize);
            }
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::Config("head fit needs at least one frame".into()));
        }
        let x = DMatrix::from_row_slice(n, d + 1, &rows);
        let mut y = DMatrix::<f64>::zeros(n, v);
        for (i, &l) in labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        let mut xtx = x.transpose() * &x;
        let step = n as f64 / xtx.trace();
        for i in 0..=d {
            xtx[(i, i)] += ridge;
        }
        let mut w = xtx
            .cholesky()
            .ok_or_else(|| Error::Config("head regression is singular".into()))?
            .solve(&(x.transpose() * &y));
        for _ in 0..iterations {
            let mut p = &x * &w;
            for mut row in p.row_iter_mut() {
                let z = crate::math::log_sum_exp(row.iter().copied());
                row.apply(|e| *e = (*e - z).exp());
            }
            let grad = x.transpose() * (p - &y) / n as f64 + &w * (ridge / n as f64);
            w -= grad * (2.0 * step);
        }
        self.head_w = w.rows(0, d).transpose();
        self.head_b = w.row(d).transpose();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_layers() {
        assert_eq!(default_taps(20), vec![6, 12, 20]);
        assert_eq!(default_taps(4), vec![2, 3, 4]);
        assert_eq!(default_taps(1), vec![1]);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = SyntheticEncoder::random(4, 3, 5, 1.0, 7).unwrap();
        let b = SyntheticEncoder::random(4, 3, 5, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let x = DMatrix::from_fn(6, 4, |i, j| (i as f64 - j as f64) * 0.3);
        assert_eq!(a.encode(&x).unwrap(), b.encode(&x).unwrap());
        assert!(a.encode(&DMatrix::zeros(2, 3)).is_err());
    }
}
