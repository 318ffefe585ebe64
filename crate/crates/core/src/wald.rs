//! Test of equal reduced-form row sums across units.
//!
//! When every unit's incoming link weights sum to one, all rows of the
//! reduced form share the same sum `beta + (rho*beta + gamma) / (1 - rho)`
//! (each row of `Pi = (I - rho W)^-1 (beta I + gamma W)` inherits it by the
//! Neumann expansion).  The test regresses each unit's outcome on all
//! units' covariates and compares the fitted row sums, clustering by
//! period so cross-sectionally dependent shocks do not distort size.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::ols::estimate_ols_reduced_form;
use crate::panel::PanelData;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaldReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Fitted reduced-form row sum per unit.
    pub row_sums: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Requires a univariate panel (`K = 1`): with several covariates the row
/// sums are covariate-specific and the pooled restriction is not meaningful.
pub fn rowsum_wald_test(panel: &PanelData) -> Result<WaldReport> {
    let (t, n, k) = (panel.t(), panel.n(), panel.k());
    if k != 1 {
        return Err(Error::Invalid(format!(
            "row-sum test is defined for a single covariate, got {k}"
        )));
    }
    if n < 2 {
        return Err(Error::Invalid("row-sum test needs at least two units".into()));
    }

    let fit = estimate_ols_reduced_form(panel)?;
    let pi = &fit.pi.pi[0];
    let row_sums: Vec<f64> = (0..n).map(|i| pi.row(i).sum()).collect();

    // Per-equation normalized Gram and its action on the summing vector:
    // u = Q^-1 1 with Q = (1/T) sum_t x_t x_t'.  The variance of a fitted
    // row sum then only needs the scalars a_t = x_t' u.
    let q = &fit.gram / t as f64;
    let ones = DVector::from_element(n, 1.0);
    let u = q
        .clone()
        .lu()
        .solve(&ones)
        .ok_or_else(|| Error::Numerical("covariate Gram matrix is singular".into()))?;
    let mut a = DVector::zeros(t);
    for tt in 0..t {
        let mut s = 0.0;
        for j in 0..n {
            s += panel.x[0][(tt, j)] * u[j];
        }
        a[tt] = s;
    }

    // C[(i, j)] = (1/T) sum_t v_it v_jt a_t^2 is the row-sum covariance
    // clustered by period; differences against the last unit give R V R'.
    let mut scaled = fit.residuals.clone();
    for tt in 0..t {
        let w = a[tt] * a[tt];
        for i in 0..n {
            scaled[(tt, i)] *= w;
        }
    }
    let c = (fit.residuals.transpose() * scaled) / t as f64;

    let m = n - 1;
    let mut rvr = DMatrix::zeros(m, m);
    for r in 0..m {
        for s in 0..m {
            rvr[(r, s)] = c[(r, s)] - c[(r, m)] - c[(m, s)] + c[(m, m)];
        }
    }
    let d = DVector::from_iterator(m, (0..m).map(|r| row_sums[r] - row_sums[m]));

    let sol = rvr.clone().lu().solve(&d).ok_or_else(|| {
        Error::Numerical(
            "row-sum covariance matrix is singular; residual variation is degenerate".into(),
        )
    })?;
    let statistic = t as f64 * d.dot(&sol);
    if !statistic.is_finite() || statistic < 0.0 {
        return Err(Error::Numerical(format!(
            "row-sum statistic is not a nonnegative number: {statistic}"
        )));
    }

    let chi = ChiSquared::new(m as f64)
        .map_err(|e| Error::Numerical(format!("chi-squared with {m} dof: {e}")))?;
    let p_value = 1.0 - chi.cdf(statistic);

    Ok(WaldReport {
        statistic,
        dof: m,
        p_value,
        row_sums,
        warnings: fit.warnings,
    })
}
