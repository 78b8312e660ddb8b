//! Small numeric helpers shared across modules.

/// Pairwise summation with a fixed tree shape (split at the midpoint).
///
/// The tree depends only on the slice length, so the result is identical
/// no matter how callers parallelize the work that produced the values.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
