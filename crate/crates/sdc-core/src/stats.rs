//! Small statistical helpers shared across modules.

use crate::error::{Error, Result};
use ndarray::ArrayView1;

/// Sample mean. Empty input yields 0.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (ddof = 1). Fewer than two values yields 0.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Median with the even-length convention of averaging the two middle values.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pearson correlation. Returns `None` when either input has (numerically)
/// zero variance, so callers can flag the ratio as undefined rather than
/// propagate NaN.
pub fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson over unequal lengths");
    let n = a.len();
    if n < 2 {
        return None;
    }
    let ma = a.sum() / n as f64;
    let mb = b.sum() / n as f64;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-24 {
        return None;
    }
    Some(sab / denom)
}

/// Cosine similarity; errors with the offending row index when either vector
/// has zero norm. `row` is only used for error reporting.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, row: usize) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine over unequal lengths");
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector(row));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Cosine distance `1 - cos(a, b)`.
pub fn cosine_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, row: usize) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b, row)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn median_even_averages_middle_pair() {
        assert_abs_diff_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_abs_diff_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn pearson_of_identical_vectors_is_one() {
        let a = array![1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(pearson(a.view(), a.view()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_flags_constant_input_as_undefined() {
        let a = array![1.0, 1.0, 1.0];
        let b = array![1.0, 2.0, 3.0];
        assert!(pearson(a.view(), b.view()).is_none());
    }

    #[test]
    fn pearson_is_shift_and_scale_invariant() {
        let a = array![0.3, -1.2, 2.5, 0.0, 1.1];
        let b = array![1.0, 0.2, -0.4, 2.2, 0.9];
        let r0 = pearson(a.view(), b.view()).unwrap();
        let a2 = a.mapv(|x| 3.5 * x - 2.0);
        let r1 = pearson(a2.view(), b.view()).unwrap();
        assert_abs_diff_eq!(r0, r1, epsilon = 1e-12);
    }

    #[test]
    fn cosine_unit_basis_vectors() {
        let e1 = array![1.0, 0.0];
        let e2 = array![0.0, 1.0];
        let d = array![1.0, 1.0];
        assert_abs_diff_eq!(cosine_similarity(e1.view(), e2.view(), 0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(e1.view(), d.view(), 0).unwrap(),
            1.0 / 2f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_zero_vector_reports_row() {
        let z = array![0.0, 0.0];
        let b = array![1.0, 0.0];
        match cosine_similarity(z.view(), b.view(), 7) {
            Err(crate::error::Error::ZeroVector(7)) => {}
            other => panic!("expected ZeroVector(7), got {other:?}"),
        }
    }
}
