//! Slice-level numerics shared by the graph ops and by inference code.

use crate::error::{invalid, Result};
use crate::float::Float;

pub fn softmax<T: Float>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return invalid("softmax of an empty vector");
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax<T: Float>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return invalid("log_softmax of an empty vector");
    }
    let mut out = logits.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

/// `-sum_k target_k * log_probs_k`
pub fn cross_entropy<T: Float>(target: &[T], log_probs: &[T]) -> Result<T> {
    if target.len() != log_probs.len() {
        return invalid(format!(
            "cross_entropy length mismatch: {} vs {}",
            target.len(),
            log_probs.len()
        ));
    }
    Ok(-target
        .iter()
        .zip(log_probs)
        .map(|(&t, &lp)| if t == T::zero() { T::zero() } else { t * lp })
        .sum::<T>())
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Indices of the `k` largest values, descending; ties by ascending index.
pub fn top_k<T: Float>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn argmax<T: Float>(values: &[T]) -> Option<usize> {
    top_k(values, 1).first().copied()
}
