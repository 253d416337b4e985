use nalgebra::DMatrix;

use crate::math::{log_add_exp, log_sum_exp, NEG_INF};

#[derive(Debug, Clone, PartialEq)]
pub struct CtcLoss {
    /// `-ln P(labels)`; infinite when the labels cannot fit in the frames.
    pub loss: f64,
    /// Gradient of `loss` with respect to the unnormalized logits. All zeros
    /// when infeasible.
    pub grad: DMatrix<f64>,
    pub feasible: bool,
}

/// CTC negative log-likelihood of `labels` under per-frame softmax of
/// `logits` (frames are rows), with its gradient by forward-backward.
pub fn ctc_loss(logits: &DMatrix<f64>, labels: &[u32], blank: u32) -> CtcLoss {
    let (t_max, v) = logits.shape();
    let mut log_y = DMatrix::zeros(t_max, v);
    for t in 0..t_max {
        let row: Vec<f64> = logits.row(t).iter().copied().collect();
        let z = log_sum_exp(row.iter().copied());
        for k in 0..v {
            log_y[(t, k)] = row[k] - z;
        }
    }
    let s_len = 2 * labels.len() + 1;
    let sym = |s: usize| if s.is_multiple_of(2) { blank } else { labels[s / 2] } as usize;
    let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2);
    let infeasible = || CtcLoss {
        loss: f64::INFINITY,
        grad: DMatrix::zeros(t_max, v),
        feasible: false,
    };
    if t_max == 0 {
        return if labels.is_empty() {
            CtcLoss {
                loss: 0.0,
                grad: DMatrix::zeros(0, v),
                feasible: true,
            }
        } else {
            infeasible()
        };
    }

    // alpha includes the emission at t; beta covers frames after t only
    let mut alpha = DMatrix::from_element(t_max, s_len, NEG_INF);
    alpha[(0, 0)] = log_y[(0, sym(0))];
    if s_len > 1 {
        alpha[(0, 1)] = log_y[(0, sym(1))];
    }
    for t in 1..t_max {
        for s in 0..s_len {
            let mut a = alpha[(t - 1, s)];
            if s >= 1 {
                a = log_add_exp(a, alpha[(t - 1, s - 1)]);
            }
            if skip_ok(s) {
                a = log_add_exp(a, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = a + log_y[(t, sym(s))];
        }
    }
    let mut beta = DMatrix::from_element(t_max, s_len, NEG_INF);
    beta[(t_max - 1, s_len - 1)] = 0.0;
    if s_len > 1 {
        beta[(t_max - 1, s_len - 2)] = 0.0;
    }
    for t in (0..t_max - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1, s)] + log_y[(t + 1, sym(s))];
            if s + 1 < s_len {
                b = log_add_exp(b, beta[(t + 1, s + 1)] + log_y[(t + 1, sym(s + 1))]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add_exp(b, beta[(t + 1, s + 2)] + log_y[(t + 1, sym(s + 2))]);
            }
            beta[(t, s)] = b;
        }
    }
    let mut log_p = alpha[(t_max - 1, s_len - 1)];
    if s_len > 1 {
        log_p = log_add_exp(log_p, alpha[(t_max - 1, s_len - 2)]);
    }
    if log_p == NEG_INF {
        return infeasible();
    }

    let mut grad = log_y.map(f64::exp);
    for t in 0..t_max {
        let mut occupancy = vec![NEG_INF; v];
        for s in 0..s_len {
            let k = sym(s);
            occupancy[k] = log_add_exp(occupancy[k], alpha[(t, s)] + beta[(t, s)]);
        }
        for (k, occ) in occupancy.into_iter().enumerate() {
            if occ > NEG_INF {
                grad[(t, k)] -= (occ - log_p).exp();
            }
        }
    }
    CtcLoss {
        loss: -log_p,
        grad,
        feasible: true,
    }
}
