//! Binary containers for per-frame acoustic model outputs.
//!
//! `CTCE`: magic, u32 version (1), u32 frames, u32 vocab size, then
//! frames x vocab little-endian f32 natural-log probabilities, row-major.
//!
//! `CTCP`: magic, u32 version (1), u32 frames, u32 phones, u32 upsample factor,
//! then frames x phones little-endian f32 linear probabilities.

use crate::error::{Error, Result};

pub const EMISSIONS_MAGIC: [u8; 4] = *b"CTCE";
pub const POSTERIORS_MAGIC: [u8; 4] = *b"CTCP";
pub const FORMAT_VERSION: u32 = 1;
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.bytes.get(..4).unwrap_or(self.bytes);
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            expected: end,
            found: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f32>> {
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| Error::Shape("declared size overflows".into()))?;
        let rest = &self.bytes[self.pos..];
        if rest.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: rest.len(),
            });
        }
        Ok(rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(v));
    }
    Ok(())
}

/// T x V natural-log subword probabilities, blank included.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionMatrix {
    frames: usize,
    vocab_size: usize,
    values: Vec<f32>,
}

impl EmissionMatrix {
    pub fn new(frames: usize, vocab_size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * vocab_size {
            return Err(Error::Truncated {
                expected: frames * vocab_size * 4,
                found: values.len() * 4,
            });
        }
        for (row, chunk) in values.chunks(vocab_size.max(1)).enumerate().take(frames) {
            let mut sum = 0.0f64;
            for (col, &v) in chunk.iter().enumerate() {
                if v.is_nan() || v == f32::INFINITY {
                    return Err(Error::NonFinite { row, col });
                }
                sum += (v as f64).exp();
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowNotNormalized { row, sum });
            }
        }
        Ok(Self {
            frames,
            vocab_size,
            values,
        })
    }

    /// Builds a matrix from linear probability rows (converted to log).
    pub fn from_prob_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let vocab_size = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != vocab_size) {
            return Err(Error::Shape("ragged probability rows".into()));
        }
        let values = rows
            .iter()
            .flat_map(|r| r.iter().map(|&p| p.ln() as f32))
            .collect();
        Self::new(rows.len(), vocab_size, values)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic(EMISSIONS_MAGIC)?;
        check_version(r.u32()?)?;
        let frames = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let values = r.floats(frames * vocab_size)?;
        Self::new(frames, vocab_size, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(&EMISSIONS_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.vocab_size + v] as f64
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.vocab_size..(t + 1) * self.vocab_size]
    }
}

/// Full-frame-rate phone posteriors from the phone alignment network.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonePosteriorMatrix {
    frames: usize,
    phones: usize,
    upsample: u32,
    values: Vec<f32>,
}

impl PhonePosteriorMatrix {
    pub fn new(frames: usize, phones: usize, upsample: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * phones {
            return Err(Error::Truncated {
                expected: frames * phones * 4,
                found: values.len() * 4,
            });
        }
        if upsample == 0 {
            return Err(Error::Shape("upsample factor must be positive".into()));
        }
        for (row, chunk) in values.chunks(phones.max(1)).enumerate().take(frames) {
            let mut sum = 0.0f64;
            for (col, &v) in chunk.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NonFinite { row, col });
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowNotNormalized { row, sum });
            }
        }
        Ok(Self {
            frames,
            phones,
            upsample,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], upsample: u32) -> Result<Self> {
        let phones = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != phones) {
            return Err(Error::Shape("ragged posterior rows".into()));
        }
        let values = rows
            .iter()
            .flat_map(|r| r.iter().map(|&p| p as f32))
            .collect();
        Self::new(rows.len(), phones, upsample, values)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic(POSTERIORS_MAGIC)?;
        check_version(r.u32()?)?;
        let frames = r.u32()? as usize;
        let phones = r.u32()? as usize;
        let upsample = r.u32()?;
        let values = r.floats(frames * phones)?;
        Self::new(frames, phones, upsample, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.values.len() * 4);
        out.extend_from_slice(&POSTERIORS_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.phones as u32).to_le_bytes());
        out.extend_from_slice(&self.upsample.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn phones(&self) -> usize {
        self.phones
    }

    pub fn upsample(&self) -> u32 {
        self.upsample
    }

    #[inline]
    pub fn get(&self, t: usize, p: usize) -> f64 {
        self.values[t * self.phones + p] as f64
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.phones..(t + 1) * self.phones]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctce(frames: u32, vocab: u32, values: &[f32]) -> Vec<u8> {
        let mut b = b"CTCE".to_vec();
        for x in [1, frames, vocab] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn loads_minimal_file() {
        let row = [0.5f32.ln(), 0.25f32.ln(), 0.25f32.ln()];
        let vals: Vec<f32> = row.iter().chain(row.iter()).copied().collect();
        let m = EmissionMatrix::load(&ctce(2, 3, &vals)).unwrap();
        assert_eq!((m.frames(), m.vocab_size()), (2, 3));
        assert!((m.get(1, 0) - 0.5f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let vals = [(1.0f32 / 3.0).ln(); 5];
        assert!(matches!(
            EmissionMatrix::load(&ctce(2, 3, &vals)),
            Err(Error::Truncated {
                expected: 24,
                found: 20
            })
        ));
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        // each entry ln(0.8/3) so every row sums to 0.8
        let vals = [(0.8f32 / 3.0).ln(); 6];
        match EmissionMatrix::load(&ctce(2, 3, &vals)) {
            Err(Error::RowNotNormalized { row: 0, sum }) => assert!((sum - 0.8).abs() < 1e-6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = ctce(0, 0, &[]);
        b[0] = b'X';
        assert!(matches!(
            EmissionMatrix::load(&b),
            Err(Error::BadMagic { .. })
        ));
        let mut b = ctce(0, 0, &[]);
        b[4] = 2;
        assert!(matches!(
            EmissionMatrix::load(&b),
            Err(Error::UnsupportedVersion(2))
        ));
        assert!(matches!(
            EmissionMatrix::load(b"CT"),
            Err(Error::BadMagic { .. })
        ));
    }

    fn ctcp(frames: u32, phones: u32, up: u32, values: &[f32]) -> Vec<u8> {
        let mut b = b"CTCP".to_vec();
        for x in [1, frames, phones, up] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn posteriors_mirror_emission_contract() {
        let good = ctcp(2, 2, 2, &[0.5, 0.5, 1.0, 0.0]);
        let m = PhonePosteriorMatrix::load(&good).unwrap();
        assert_eq!((m.frames(), m.phones(), m.upsample()), (2, 2, 2));
        assert_eq!(m.to_bytes(), good);

        assert!(matches!(
            PhonePosteriorMatrix::load(&ctcp(2, 2, 2, &[0.5, 0.5, 1.0])),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            PhonePosteriorMatrix::load(&ctcp(1, 2, 2, &[0.4, 0.4])),
            Err(Error::RowNotNormalized { .. })
        ));
        assert!(matches!(
            PhonePosteriorMatrix::load(&ctcp(1, 2, 0, &[0.5, 0.5])),
            Err(Error::Shape(_))
        ));
    }
}
