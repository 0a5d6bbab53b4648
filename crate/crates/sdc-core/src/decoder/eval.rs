//! Retrieval evaluation: top-k accuracy under cosine distance.
//!
//! For each held-out item, every true embedding row is a candidate; a hit
//! means the item's own row is among the k nearest to its prediction. Ties
//! are broken by ascending row index, so the metric is a total order and
//! exactly reproducible. The implementation counts strictly-closer candidates
//! per row (no sorting), which keeps it structurally different from the
//! sort-based oracle used in tests.

use crate::error::{Error, Result};
use ndarray::ArrayView2;

/// Chance level in percent: k hits among n candidates.
pub fn chance_accuracy(n: usize, k: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

/// Percentage of rows whose true embedding ranks within the k nearest
/// candidates of the prediction.
pub fn topk_accuracy(y_true: ArrayView2<'_, f64>, y_pred: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    if y_true.dim() != y_pred.dim() {
        return Err(Error::Shape(format!(
            "true {:?} vs predicted {:?}",
            y_true.dim(),
            y_pred.dim()
        )));
    }
    let n = y_true.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    // precompute norms; zero-norm rows make cosine undefined
    let mut true_norms = Vec::with_capacity(n);
    for (i, row) in y_true.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        true_norms.push(norm);
    }
    let mut pred_norms = Vec::with_capacity(n);
    for (i, row) in y_pred.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        pred_norms.push(norm);
    }

    // cosine distance matrix rows: prediction i against all true rows
    let sims = y_pred.dot(&y_true.t()); // n x n dot products
    let mut hits = 0usize;
    for i in 0..n {
        let d_self = 1.0 - sims[[i, i]] / (pred_norms[i] * true_norms[i]);
        let mut closer = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = 1.0 - sims[[i, j]] / (pred_norms[i] * true_norms[j]);
            // lexicographic (distance, index) order; i beats j on equal distance iff j > i
            if d < d_self || (d == d_self && j < i) {
                closer += 1;
            }
        }
        if closer < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    #[test]
    fn perfect_predictions_score_one_hundred() {
        let y = random_unit_rows(20, 6, 0);
        assert_eq!(topk_accuracy(y.view(), y.view(), 1).unwrap(), 100.0);
    }

    #[test]
    fn constant_predictions_hit_exactly_chance_via_tie_breaks() {
        let y = random_unit_rows(25, 5, 1);
        let mut pred = Array2::zeros((25, 5));
        for mut row in pred.rows_mut() {
            row.assign(&y.row(7));
        }
        for k in [1usize, 3, 10] {
            let acc = topk_accuracy(y.view(), pred.view(), k).unwrap();
            assert_eq!(acc, chance_accuracy(25, k), "k = {k}");
        }
    }

    #[test]
    fn k_equal_n_is_always_one_hundred() {
        let y = random_unit_rows(12, 4, 2);
        let p = random_unit_rows(12, 4, 3);
        assert_eq!(topk_accuracy(y.view(), p.view(), 12).unwrap(), 100.0);
    }

    #[test]
    fn positive_rescaling_of_predictions_changes_nothing() {
        let y = random_unit_rows(15, 4, 4);
        let mut p = random_unit_rows(15, 4, 5);
        let base = topk_accuracy(y.view(), p.view(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mut row in p.rows_mut() {
            let c: f64 = rng.gen_range(0.1..10.0);
            row.mapv_inplace(|v| c * v);
        }
        assert_eq!(topk_accuracy(y.view(), p.view(), 3).unwrap(), base);
    }

    #[test]
    fn zero_norm_prediction_reports_row() {
        let y = random_unit_rows(4, 3, 7);
        let mut p = y.clone();
        p.row_mut(2).fill(0.0);
        match topk_accuracy(y.view(), p.view(), 1) {
            Err(Error::ZeroVector(2)) => {}
            other => panic!("expected ZeroVector(2), got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_k_is_invalid() {
        let y = random_unit_rows(4, 3, 8);
        assert!(matches!(topk_accuracy(y.view(), y.view(), 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(topk_accuracy(y.view(), y.view(), 5), Err(Error::InvalidArgument(_))));
    }
}
