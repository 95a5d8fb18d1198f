//! Shared helpers for the integration tests.
//!
//! The backward-Euler solver here is a deliberately independent implementation:
//! it fits conditional expectations with raw (uncentered, unscaled) monomials
//! through an SVD least-squares solve, so it shares no code path with the
//! library's centered-Cholesky regression engine. Agreement between the two is
//! therefore evidence, not tautology.

use bsvie::model::PathEnsemble;
use nalgebra::{DMatrix, DVector};

/// Fitted values of `targets` regressed on `(1, w, w^2, w^3)` by SVD
/// least squares. Rank-deficient designs (all paths at the same state, as at
/// the first node) fall back to the pseudo-inverse solution.
fn svd_fit(w: &[f64], targets: &[f64]) -> Vec<f64> {
    let m = w.len();
    let mut a = DMatrix::<f64>::zeros(m, 4);
    for p in 0..m {
        let x = w[p];
        a[(p, 0)] = 1.0;
        a[(p, 1)] = x;
        a[(p, 2)] = x * x;
        a[(p, 3)] = x * x * x;
    }
    let b = DVector::from_column_slice(targets);
    let svd = a.clone().svd(true, true);
    let coeffs = svd.solve(&b, 1e-10).expect("SVD least squares");
    (a * coeffs).as_slice().to_vec()
}

/// Backward Euler for the one-dimensional backward equation
///
/// ```text
/// y(t) = xi + INT_t^T f(y, z) ds - INT_t^T z dW
/// ```
///
/// on the grid of `ens`, one value per node and path:
///
/// ```text
/// z_i = E_i[ y_{i+1} dW_i ] / step_i,
/// y_i = E_i[ y_{i+1} ] + step_i * f(E_i[y_{i+1}], z_i).
/// ```
///
/// Returns `y[node][path]`.
pub fn backward_euler_bsde(
    ens: &PathEnsemble,
    terminal: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<Vec<f64>> {
    assert_eq!(ens.dim(), 1, "oracle is one-dimensional");
    let grid = ens.grid();
    let n = grid.n_steps();
    let m = ens.n_paths();
    assert_eq!(terminal.len(), m);

    let mut y = vec![vec![0.0f64; m]; n + 1];
    y[n].copy_from_slice(terminal);
    for i in (0..n).rev() {
        let w: Vec<f64> = (0..m).map(|p| ens.w_at(i, p, 0)).collect();
        let step = grid.step(i);
        let dw = ens.dw_slice(i);
        let z_target: Vec<f64> = (0..m).map(|p| y[i + 1][p] * dw[p] / step).collect();
        let z_fit = svd_fit(&w, &z_target);
        let ey = svd_fit(&w, &y[i + 1]);
        for p in 0..m {
            y[i][p] = ey[p] + step * f(ey[p], z_fit[p]);
        }
    }
    y
}

/// Mean and (population) standard deviation of a sample.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
