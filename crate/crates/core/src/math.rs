//! Log-domain helpers shared by the decoders and the loss.

pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// `ln(exp(a) + exp(b))` without overflow; exact for infinite operands.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Converts a base-10 log probability (ARPA convention) to natural log.
#[inline]
pub fn log10_to_ln(v: f64) -> f64 {
    v * std::f64::consts::LN_10
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_matches_direct() {
        let a = (0.3f64).ln();
        let b = (0.2f64).ln();
        assert!((log_add_exp(a, b) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(log_add_exp(NEG_INF, a), a);
        assert_eq!(log_add_exp(NEG_INF, NEG_INF), NEG_INF);
    }

    #[test]
    fn log_sum_handles_empty_and_large() {
        assert_eq!(log_sum_exp([]), NEG_INF);
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
