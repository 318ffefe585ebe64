use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::StructuralParams;

/// Condition numbers above this are treated as a failure of the spectral
/// assumption even when the row-sum bound nominally holds.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Reduced-form coefficient matrices, one `N x N` matrix per covariate:
/// `Pi_k = (I - rho W)^{-1} (beta_k I + gamma_k W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedForm {
    pub pi: Vec<DMatrix<f64>>,
}

impl ReducedForm {
    pub fn n(&self) -> usize {
        self.pi[0].nrows()
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// Row sums of the k-th coefficient matrix.  Under a fully row-normalized
    /// network these all equal `(beta_k + gamma_k) / (1 - rho)`.
    pub fn row_sums(&self, k: usize) -> Vec<f64> {
        let m = &self.pi[k];
        (0..m.nrows()).map(|i| m.row(i).sum()).collect()
    }
}

/// Inverse of `S = I - rho W`, gated on an exact condition estimate so a
/// numerically singular system is refused rather than silently amplified.
/// Reused by every routine that needs `S^{-1}` applied to something.
pub(crate) struct SolvedS {
    pub inv: DMatrix<f64>,
}

pub(crate) fn solve_s(rho: f64, w: &DMatrix<f64>) -> Result<SolvedS> {
    let n = w.nrows();
    let mut s = w * -rho;
    for i in 0..n {
        s[(i, i)] += 1.0;
    }
    let norm_s = one_norm(&s);
    let inv = s
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Assumption("I - rho W is singular".into()))?;
    let cond_1 = norm_s * one_norm(&inv);
    if !cond_1.is_finite() || cond_1 > CONDITION_LIMIT {
        return Err(Error::Assumption(format!(
            "I - rho W is numerically singular (condition estimate {cond_1:.3e})"
        )));
    }
    Ok(SolvedS { inv })
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum of `rho W`, the spectral-bound statistic.
pub fn rho_w_row_norm(rho: f64, w: &DMatrix<f64>) -> f64 {
    (0..w.nrows())
        .map(|i| w.row(i).iter().map(|v| (rho * v).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Computes the reduced form by direct factorization of `I - rho W`.
///
/// Errors when `I - rho W` is singular or numerically singular (condition
/// above [`CONDITION_LIMIT`]), which is how a spectral-bound violation
/// manifests here.  Points outside the spectral bound whose factorization is
/// still well-conditioned are computed as-is so that degenerate
/// parameterizations sharing a reduced form can be inspected.
pub fn reduced_form(theta: &StructuralParams) -> Result<ReducedForm> {
    let w = theta.network.weights();
    let solved = solve_s(theta.rho, w)?;
    let n = theta.n();
    let pi = theta
        .beta
        .iter()
        .zip(&theta.gamma)
        .map(|(&b, &g)| {
            let mut bmat = w * g;
            for i in 0..n {
                bmat[(i, i)] += b;
            }
            &solved.inv * bmat
        })
        .collect();
    Ok(ReducedForm { pi })
}

/// Computes the reduced form through the series
/// `Pi_k = beta_k I + (rho beta_k + gamma_k) sum_{m>=1} rho^{m-1} W^m`,
/// truncated once the geometric tail bound drops below `tol`.  Serves as an
/// independent cross-check of [`reduced_form`].
pub fn reduced_form_neumann(theta: &StructuralParams, tol: f64) -> Result<ReducedForm> {
    let w = theta.network.weights();
    let n = theta.n();
    let a = rho_w_row_norm(theta.rho, w);
    if a >= 1.0 {
        return Err(Error::Assumption(format!(
            "series requires max |rho W| row sum < 1, got {a}"
        )));
    }
    // Tail after M terms is bounded by a^(M+1) / (1 - a).
    let order = if a <= f64::EPSILON {
        1
    } else {
        let m = ((tol * (1.0 - a)).ln() / a.ln()).ceil() as usize;
        m.max(1)
    };
    let mut power = w.clone();
    let mut series = DMatrix::zeros(n, n);
    let mut rho_pow = 1.0;
    for m in 1..=order {
        series += &power * rho_pow;
        if m < order {
            power = &power * w;
            rho_pow *= theta.rho;
        }
    }
    let pi = theta
        .beta
        .iter()
        .zip(&theta.gamma)
        .map(|(&b, &g)| {
            let mut m = &series * (theta.rho * b + g);
            for i in 0..n {
                m[(i, i)] += b;
            }
            m
        })
        .collect();
    Ok(ReducedForm { pi })
}
