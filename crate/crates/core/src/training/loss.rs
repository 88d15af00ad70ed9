//! Loss functions. Each `*_with_grad` variant also returns the gradient of
//! the scalar loss with respect to its logits / similarities.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};

use crate::encoder::Scalar;
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Mean token cross-entropy over rows of `[n, |V|]` logits. `n` must be > 0.
pub fn mlm_loss_with_grad<T: Scalar>(logits: ArrayView2<T>, targets: &[TokenId]) -> Result<(T, Array2<T>)> {
    let (n, vocab) = logits.dim();
    if n == 0 {
        return Err(Error::invalid("no masked positions: the batch has nothing to predict"));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let mut grad = logits.to_owned();
    let mut total = T::zero();
    for (mut row, &target) in grad.axis_iter_mut(Axis(0)).zip(targets) {
        let t = target as usize;
        if t >= vocab {
            return Err(Error::Shape(format!("target {t} >= vocab {vocab}")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[t];
        row.mapv_inplace(|v| (v - log_z).exp() * inv_n);
        row[t] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Masked-LM loss over `[batch, seq, |V|]` logits; `None` targets are
/// ignored. A batch without any target is an error.
pub fn mlm_loss<T: Scalar>(logits: ArrayView3<T>, targets: &[Vec<Option<TokenId>>]) -> Result<T> {
    let (b, s, vocab) = logits.dim();
    if targets.len() != b || targets.iter().any(|t| t.len() != s) {
        return Err(Error::Shape("targets do not match logits".into()));
    }
    let picked: Vec<(usize, usize, TokenId)> = targets
        .iter()
        .enumerate()
        .flat_map(|(bi, row)| row.iter().enumerate().filter_map(move |(j, t)| t.map(|id| (bi, j, id))))
        .collect();
    let mut rows = Array2::zeros((picked.len(), vocab));
    for (r, &(bi, j, _)) in picked.iter().enumerate() {
        rows.row_mut(r).assign(&logits.slice(ndarray::s![bi, j, ..]));
    }
    let ids: Vec<TokenId> = picked.iter().map(|p| p.2).collect();
    Ok(mlm_loss_with_grad(rows.view(), &ids)?.0)
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean binary cross-entropy over every (document, label) cell, in the
/// overflow-free form `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_multilabel_with_grad<T: Scalar>(logits: ArrayView2<T>, labels: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    if logits.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.dim(),
            labels.dim()
        )));
    }
    if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::invalid("multi-label targets must be 0 or 1"));
    }
    let cells = logits.len();
    if cells == 0 {
        return Err(Error::Shape("empty logits".into()));
    }
    let inv = T::lit(1.0 / cells as f64);
    let mut total = T::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    Zip::from(&mut grad).and(&logits).and(&labels).for_each(|g, &z, &y| {
        total += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) * inv;
    });
    Ok((total * inv, grad))
}

pub fn bce_multilabel_loss<T: Scalar>(logits: ArrayView2<T>, labels: ArrayView2<T>) -> Result<T> {
    Ok(bce_multilabel_with_grad(logits, labels)?.0)
}

/// Max-of-hinges triplet ranking loss over an `N x N` similarity matrix
/// whose diagonal holds the true pairs. For each anchor only the hardest
/// in-batch negative counts, in both directions:
///
/// `mean_i( max_{j≠i}[m - s_ii + s_ij]₊ + max_{j≠i}[m - s_ii + s_ji]₊ )`
///
/// `is_negative(i, j)` may exclude off-diagonal cells that are not true
/// negatives (e.g. two pairs drawn from the same case).
pub fn triplet_mh_with_grad<T: Scalar>(
    sim: ArrayView2<T>,
    margin: f64,
    is_negative: impl Fn(usize, usize) -> bool,
) -> Result<(T, Array2<T>)> {
    let (n, n2) = sim.dim();
    if n != n2 {
        return Err(Error::Shape(format!("similarity matrix must be square, got {n}x{n2}")));
    }
    if n < 2 {
        return Err(Error::invalid("triplet loss needs at least two pairs"));
    }
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::invalid(format!("margin must be positive, got {margin}")));
    }
    let m = T::lit(margin);
    let inv_n = T::lit(1.0 / n as f64);
    let mut grad = Array2::zeros((n, n));
    let mut total = T::zero();
    for i in 0..n {
        let pos = sim[[i, i]];
        // hardest negative caption for anchor i (row), then hardest anchor for caption i (column)
        let row_best =
            (0..n)
                .filter(|&j| j != i && is_negative(i, j))
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if sim[[i, b]] >= sim[[i, j]] => Some(b),
                    _ => Some(j),
                });
        if let Some(j) = row_best {
            let hinge = m - pos + sim[[i, j]];
            if hinge > T::zero() {
                total += hinge;
                grad[[i, i]] -= inv_n;
                grad[[i, j]] += inv_n;
            }
        }
        let col_best =
            (0..n)
                .filter(|&j| j != i && is_negative(j, i))
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if sim[[b, i]] >= sim[[j, i]] => Some(b),
                    _ => Some(j),
                });
        if let Some(j) = col_best {
            let hinge = m - pos + sim[[j, i]];
            if hinge > T::zero() {
                total += hinge;
                grad[[i, i]] -= inv_n;
                grad[[j, i]] += inv_n;
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn triplet_mh_loss<T: Scalar>(sim: ArrayView2<T>, margin: f64) -> Result<T> {
    Ok(triplet_mh_with_grad(sim, margin, |_, _| true)?.0)
}
