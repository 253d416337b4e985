//! Adaptive boosting of trie subwords found among a frame's top-K candidates.
//!
//! A candidate at rank `k` trailing the frame's best log-probability by `gap`
//! receives `h = delta(k, gap) * gap`, where `delta` is a falling sigmoid
//! centred at `gap = 0.5 k` with width `0.1 k`. Close runners-up are boosted
//! by almost their whole gap, distant ones by almost nothing.

use serde::{Deserialize, Serialize};

/// Which reading of the boost formulas to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoostSign {
    /// `gap = top1 - candidate >= 0`: non-negative boost decaying with the gap.
    #[default]
    Corrected,
    /// Formulas as printed: the signed difference `candidate - top1` is used
    /// in both places, so the boost is a non-positive penalty.
    PaperLiteral,
}

/// Boosting scale for the candidate at 1-based `rank` whose log-probability
/// trails the frame's best by `gap >= 0`.
pub fn boosting_scale(rank: usize, gap: f64, sign: BoostSign) -> f64 {
    debug_assert!(rank >= 1);
    let k = rank as f64;
    let x = match sign {
        BoostSign::Corrected => gap,
        BoostSign::PaperLiteral => -gap,
    };
    let z = (x - 0.5 * k) / (0.1 * k);
    1.0 / (1.0 + z.exp())
}

/// Additional score for a candidate that advances a trie cursor.
pub fn boost_score(rank: usize, gap: f64, sign: BoostSign) -> f64 {
    let delta = boosting_scale(rank, gap, sign);
    match sign {
        BoostSign::Corrected => delta * gap,
        BoostSign::PaperLiteral => -delta * gap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_is_one_half() {
        assert_eq!(boosting_scale(5, 2.5, BoostSign::Corrected), 0.5);
    }

    #[test]
    fn direct_evaluation() {
        let d = boosting_scale(1, 0.0, BoostSign::Corrected);
        assert!((d - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-15);
        assert!((d - 0.99331).abs() < 1e-5);
        let d = boosting_scale(2, 10.0, BoostSign::Corrected);
        assert!((d / (1.0 / (1.0 + 45f64.exp())) - 1.0).abs() < 1e-12);
        assert!((d - 2.9e-20).abs() < 0.1e-20);
    }

    #[test]
    fn worked_boost() {
        // top1 = -0.5, rank-3 candidate = -2.0
        let gap = -0.5 - -2.0;
        assert_eq!(boosting_scale(3, gap, BoostSign::Corrected), 0.5);
        assert!((boost_score(3, gap, BoostSign::Corrected) - 0.75).abs() < 1e-15);
        assert_eq!(boost_score(1, 0.0, BoostSign::Corrected), 0.0);
    }

    #[test]
    fn literal_reading_penalizes() {
        let h = boost_score(3, 1.5, BoostSign::PaperLiteral);
        assert!(h < 0.0);
        // delta grows with the gap under the literal exponent
        assert!(
            boosting_scale(3, 3.0, BoostSign::PaperLiteral)
                > boosting_scale(3, 1.0, BoostSign::PaperLiteral)
        );
    }
}
