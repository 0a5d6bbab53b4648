//! Dense linear-algebra primitives: Cholesky factorization and the ridge
//! normal-equation solver shared by the decoder baseline and the concept-map
//! fit.
//!
//! Sizes here are modest (hundreds to low thousands of columns), so a plain
//! dense Cholesky in safe Rust is both fast enough and bit-deterministic.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Cholesky factorization `A = L L^T` of a symmetric positive-definite matrix.
/// Returns the lower-triangular factor. Fails with [`Error::Solver`] when a
/// pivot is not strictly positive (singular or indefinite input).
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Solver(format!(
                "matrix not positive definite at pivot {j} (d = {d})"
            )));
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solve `A x = b` for a single right-hand side given the Cholesky factor `L`.
pub fn cholesky_solve_vec(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `A X = B` column-by-column given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Array2<f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = Array2::<f64>::zeros((n, m));
    for c in 0..m {
        let col = b.column(c).to_owned();
        let sol = cholesky_solve_vec(l, &col);
        x.column_mut(c).assign(&sol);
    }
    x
}

/// Penalized least squares without intercept: returns the `p x m` matrix `X`
/// minimizing `||A X - B||^2 + alpha ||X||^2`, via the normal equations
/// `(A^T A + alpha I) X = A^T B`.
pub fn ridge_solve(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "ridge_solve: {} design rows vs {} target rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("negative ridge penalty {alpha}")));
    }
    let mut gram = a.t().dot(&a);
    for i in 0..gram.nrows() {
        gram[[i, i]] += alpha;
    }
    let l = cholesky(&gram)?;
    let rhs = a.t().dot(&b);
    Ok(cholesky_solve(&l, rhs.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solve_recovers_known_solution() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.2], [0.6, 1.2, 3.0]];
        let x_true = array![1.0, -2.0, 0.5];
        let b = a.dot(&x_true);
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve_vec(&l, &b);
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3 and -1
        assert!(matches!(cholesky(&a), Err(Error::Solver(_))));
    }

    #[test]
    fn ridge_solve_satisfies_normal_equations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Array2::from_shape_fn((40, 12), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0));
        let alpha = 0.7;
        let x = ridge_solve(a.view(), b.view(), alpha).unwrap();
        let resid = a.t().dot(&a).dot(&x) + alpha * &x - a.t().dot(&b);
        let max = resid.iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-9, "normal-equation residual {max}");
    }
}
