//! Closed-form ridge regression baseline with validation-driven penalty
//! selection.
//!
//! Weights solve `min ||X W^T - Y||^2 + lambda ||W||^2` with an intercept
//! handled by column centering, i.e. `W = Y_c^T X_c (X_c^T X_c + lambda I)^-1`.
//! The penalty is chosen from a grid by top-1 retrieval accuracy on a
//! validation fold — the selection metric is the deployment metric, not MSE.

use crate::decoder::eval::topk_accuracy;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Penalty grid swept by default.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] =
    [0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0];

#[derive(Debug, Clone)]
pub struct RidgeModel {
    /// d x v weight matrix.
    pub weights: Array2<f64>,
    /// Length-d intercept.
    pub intercept: Array1<f64>,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.ncols() {
            return Err(Error::Shape(format!(
                "predict input has {} voxels, model expects {}",
                x.ncols(),
                self.weights.ncols()
            )));
        }
        Ok(x.dot(&self.weights.t()) + &self.intercept)
    }
}

/// Per-penalty validation accuracy, for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeSelection {
    pub grid: Vec<f64>,
    pub val_top1: Vec<f64>,
    pub chosen_lambda: f64,
}

/// Fit one ridge model per grid point on `(x, y)` and keep the one with the
/// best validation top-1 accuracy (first maximizer on ties).
pub fn train_ridge(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    grid: &[f64],
    x_val: ArrayView2<'_, f64>,
    y_val: ArrayView2<'_, f64>,
) -> Result<(RidgeModel, RidgeSelection)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty penalty grid".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("{} x rows vs {} y rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least two training rows".into()));
    }
    for lam in grid {
        if *lam < 0.0 || !lam.is_finite() {
            return Err(Error::InvalidArgument(format!("penalty {lam} must be finite and >= 0")));
        }
    }

    let x_mean = x.mean_axis(Axis(0)).expect("nonempty");
    let y_mean = y.mean_axis(Axis(0)).expect("nonempty");
    let xc = &x - &x_mean;
    let yc = &y - &y_mean;
    let gram = xc.t().dot(&xc);
    let rhs = xc.t().dot(&yc);

    let mut best: Option<(RidgeModel, f64)> = None;
    let mut record = RidgeSelection { grid: grid.to_vec(), val_top1: Vec::new(), chosen_lambda: f64::NAN };
    for &lam in grid {
        let mut g = gram.clone();
        for i in 0..g.nrows() {
            g[[i, i]] += lam;
        }
        let l = cholesky(&g).map_err(|e| match e {
            Error::Solver(msg) => Error::Solver(format!("lambda = {lam}: {msg}")),
            other => other,
        })?;
        let wt = cholesky_solve(&l, rhs.view()); // v x d
        let weights = wt.t().to_owned(); // d x v
        let intercept = &y_mean - &weights.dot(&x_mean);
        let model = RidgeModel { weights, intercept, lambda: lam };
        let pred = model.predict(x_val)?;
        let acc = topk_accuracy(y_val, pred.view(), 1)?;
        record.val_top1.push(acc);
        let better = match &best {
            None => true,
            Some((_, best_acc)) => acc > *best_acc,
        };
        if better {
            best = Some((model, acc));
        }
    }
    let (model, _) = best.expect("nonempty grid");
    record.chosen_lambda = model.lambda;
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn near_zero_penalty_interpolates_a_full_rank_square_system() {
        let x = random(8, 8, 0);
        let y = random(8, 3, 1);
        let (model, _) = train_ridge(x.view(), y.view(), &[1e-10], x.view(), y.view()).unwrap();
        let pred = model.predict(x.view()).unwrap();
        let err = (&pred - &y).iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-4, "interpolation error {err}");
    }

    #[test]
    fn huge_penalty_shrinks_weights_to_zero() {
        let x = random(40, 10, 2);
        let y = random(40, 4, 3);
        let (model, _) = train_ridge(x.view(), y.view(), &[1e12], x.view(), y.view()).unwrap();
        let wnorm = model.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(wnorm < 1e-6, "weight norm {wnorm}");
        // prediction degenerates to the training mean
        let pred = model.predict(x.view()).unwrap();
        let ymean = y.mean_axis(Axis(0)).unwrap();
        for r in pred.rows() {
            for (a, b) in r.iter().zip(ymean.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normal_equations_hold_for_each_grid_point() {
        let x = random(60, 12, 4);
        let y = random(60, 5, 5);
        for lam in [0.1, 10.0, 1000.0] {
            let (model, _) = train_ridge(x.view(), y.view(), &[lam], x.view(), y.view()).unwrap();
            let x_mean = x.mean_axis(Axis(0)).unwrap();
            let y_mean = y.mean_axis(Axis(0)).unwrap();
            let xc = &x - &x_mean;
            let yc = &y - &y_mean;
            let lhs = xc.t().dot(&xc).dot(&model.weights.t()) + lam * &model.weights.t();
            let rhs = xc.t().dot(&yc);
            let resid = (&lhs - &rhs).iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(resid < 1e-8, "lambda {lam}: residual {resid}");
        }
    }

    #[test]
    fn selection_maximizes_validation_top1() {
        // Signal plus noise: a moderate penalty must beat a huge one, and the
        // selector must agree with its own recorded accuracies.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w_true = random(4, 30, 7);
        let xtr = random(300, 30, 8);
        let ytr = xtr.dot(&w_true.t()) + random(300, 4, 9).mapv(|v| 0.3 * v);
        let xval = random(50, 30, 10);
        let yval = xval.dot(&w_true.t()) + random(50, 4, 11).mapv(|v| 0.3 * v);
        let _ = &mut rng;
        let grid = [0.1, 1.0, 10.0, 1e6];
        let (model, sel) = train_ridge(xtr.view(), ytr.view(), &grid, xval.view(), yval.view()).unwrap();
        let best = sel.val_top1.iter().cloned().fold(f64::MIN, f64::max);
        let first_best = grid[sel.val_top1.iter().position(|a| *a == best).unwrap()];
        assert_eq!(model.lambda, first_best);
        assert_eq!(sel.chosen_lambda, model.lambda);
        assert!(sel.val_top1[0] > *sel.val_top1.last().unwrap());
    }

    #[test]
    fn default_grid_spans_seven_decades() {
        assert_eq!(DEFAULT_LAMBDA_GRID.len(), 7);
        assert_eq!(DEFAULT_LAMBDA_GRID[0], 0.1);
        assert_eq!(DEFAULT_LAMBDA_GRID[6], 100000.0);
        for w in DEFAULT_LAMBDA_GRID.windows(2) {
            assert!((w[1] / w[0] - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exactly_singular_unpenalized_system_is_a_solver_error() {
        // duplicated column with lambda = 0 makes the gram singular
        let mut x = random(20, 6, 12);
        let dup = x.column(0).to_owned();
        x.column_mut(5).assign(&dup);
        let y = random(20, 2, 13);
        assert!(matches!(
            train_ridge(x.view(), y.view(), &[0.0], x.view(), y.view()),
            Err(Error::Solver(_))
        ));
    }
}
