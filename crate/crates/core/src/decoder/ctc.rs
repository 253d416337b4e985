use crate::emissions::EmissionMatrix;
use crate::error::{Error, Result};
use crate::math::{log_add_exp, NEG_INF};

/// Exact `ln P(labels | emissions)` by the CTC forward algorithm over the
/// blank-interleaved label lattice. Returns `-inf` when the sequence cannot
/// be aligned in the available frames.
pub fn ctc_label_score(emissions: &EmissionMatrix, blank: u32, labels: &[u32]) -> Result<f64> {
    let v = emissions.vocab_size();
    for &l in labels {
        if l as usize >= v {
            return Err(Error::LabelOutOfRange {
                id: l as usize,
                vocab: v,
            });
        }
        if l == blank {
            return Err(Error::Config("blank inside a CTC label sequence".into()));
        }
    }
    let t_max = emissions.frames();
    if t_max == 0 {
        return Ok(if labels.is_empty() { 0.0 } else { NEG_INF });
    }
    let s_len = 2 * labels.len() + 1;
    let sym = |s: usize| {
        if s.is_multiple_of(2) {
            blank
        } else {
            labels[s / 2]
        }
    };

    let mut alpha = vec![NEG_INF; s_len];
    alpha[0] = emissions.get(0, blank as usize);
    if s_len > 1 {
        alpha[1] = emissions.get(0, sym(1) as usize);
    }
    let mut next = vec![NEG_INF; s_len];
    for t in 1..t_max {
        for s in 0..s_len {
            let mut a = alpha[s];
            if s >= 1 {
                a = log_add_exp(a, alpha[s - 1]);
            }
            if s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2) {
                a = log_add_exp(a, alpha[s - 2]);
            }
            next[s] = if a == NEG_INF {
                NEG_INF
            } else {
                a + emissions.get(t, sym(s) as usize)
            };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let mut total = alpha[s_len - 1];
    if s_len > 1 {
        total = log_add_exp(total, alpha[s_len - 2]);
    }
    Ok(total)
}
