//! Coordinate-descent lasso used by the regression-based screening starts.
//!
//! Minimizes `(1/2T) ||r - D c||^2 + lambda * ||c||_1` by cyclic soft
//! thresholding; `T` is the number of rows.

use nalgebra::{DMatrix, DVector};

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

pub fn lasso(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    lambda: f64,
    max_sweeps: usize,
    tol: f64,
) -> DVector<f64> {
    let (t, p) = (design.nrows(), design.ncols());
    assert_eq!(response.len(), t);
    let scale = 1.0 / t as f64;
    let col_scales: Vec<f64> = (0..p)
        .map(|j| design.column(j).norm_squared() * scale)
        .collect();

    let mut coef = DVector::zeros(p);
    let mut residual = response.clone();
    for _ in 0..max_sweeps {
        let mut max_delta = 0.0f64;
        for j in 0..p {
            if col_scales[j] <= 1e-14 {
                continue; // constant-zero column carries no information
            }
            let old = coef[j];
            let rho = design.column(j).dot(&residual) * scale + col_scales[j] * old;
            let new = soft_threshold(rho, lambda) / col_scales[j];
            if new != old {
                residual -= design.column(j) * (new - old);
                coef[j] = new;
                max_delta = max_delta.max((new - old).abs());
            }
        }
        if max_delta <= tol {
            break;
        }
    }
    coef
}
