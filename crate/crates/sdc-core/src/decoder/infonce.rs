//! One-directional contrastive loss over a batch.
//!
//! Rows of `queries` are decoded embeddings, rows of `keys` the true ones;
//! the positive for query `i` is key `i` and every other key in the batch is
//! a negative:
//!
//! ```text
//! loss = mean_i -log( exp(q_i.k_i / tau) / sum_j exp(q_i.k_j / tau) )
//! ```
//!
//! Inputs are used exactly as given — no internal re-normalization — and the
//! log-sum-exp is stabilized by max subtraction. The analytic gradients flow
//! to both sides so the same routine serves decoder training (gradients into
//! queries only) and projection fitting (gradients into both).

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

fn validate(queries: ArrayView2<'_, f64>, keys: ArrayView2<'_, f64>, tau: f64) -> Result<()> {
    if queries.dim() != keys.dim() {
        return Err(Error::Shape(format!(
            "queries {:?} vs keys {:?}",
            queries.dim(),
            keys.dim()
        )));
    }
    if queries.nrows() == 0 {
        return Err(Error::InvalidArgument("empty contrastive batch".into()));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if queries.iter().any(|v| !v.is_finite()) || keys.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite value in contrastive batch".into()));
    }
    Ok(())
}

/// Loss only. O(m^2 d).
pub fn infonce_loss(queries: ArrayView2<'_, f64>, keys: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    let (loss, _, _) = infonce_with_grads(queries, keys, tau)?;
    Ok(loss)
}

/// Loss plus gradients with respect to queries and keys.
pub fn infonce_with_grads(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    validate(queries, keys, tau)?;
    let m = queries.nrows();

    // similarity logits s_ij = q_i . k_j / tau
    let mut s = queries.dot(&keys.t());
    s.mapv_inplace(|v| v / tau);

    // softmax rows with max subtraction; accumulate the loss
    let mut loss = 0.0;
    let mut p = s; // reuse storage: p becomes softmax(s)
    for i in 0..m {
        let mut row = p.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let diag = row[i];
        loss += -(diag / z).ln();
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    loss /= m as f64;
    if !loss.is_finite() {
        return Err(Error::Numerics(format!("contrastive loss is {loss}")));
    }

    // dL/ds = (P - I)/m; chain through s = Q K^T / tau
    for i in 0..m {
        p[[i, i]] -= 1.0;
    }
    p.mapv_inplace(|v| v / (m as f64 * tau));
    let grad_q = p.dot(&keys);
    let grad_k = p.t().dot(&queries);
    Ok((loss, grad_q, grad_k))
}
