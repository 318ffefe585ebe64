//! Two-stage least squares for the structural effects at a known network.
//!
//! With the network fixed, `y_t = rho W y_t + sum_k (beta_k x_kt + gamma_k
//! W x_kt) + shocks` is a linear simultaneous system; `W y_t` is
//! endogenous and `W^2 x_kt` supplies the extra instrument.  Fixed effects
//! are removed per unit (time demeaning) and common shocks per period
//! (cross-sectional differencing, valid when rows sum to one) before
//! stacking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::panel::PanelData;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoSlsFit {
    pub rho: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Standard errors clustered by period, same layout as the estimates.
    pub se_rho: f64,
    pub se_beta: Vec<f64>,
    pub se_gamma: Vec<f64>,
    pub observations: usize,
}

fn demean_columns(m: &mut DMatrix<f64>) {
    let t = m.nrows();
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / t as f64;
        for i in 0..t {
            m[(i, j)] -= mean;
        }
    }
}

fn difference_rows(m: &mut DMatrix<f64>) {
    let n = m.ncols();
    for i in 0..m.nrows() {
        let mean = m.row(i).sum() / n as f64;
        for j in 0..n {
            m[(i, j)] -= mean;
        }
    }
}

/// Estimates `(rho, beta, gamma)` holding the network fixed.
///
/// Regressors per observation `(t, i)`: `[ (Wy)_it, x_kit, (Wx_k)_it ]`;
/// instruments: `[ x_kit, (Wx_k)_it, (W^2 x_k)_it ]`.  `demean_time`
/// removes unit fixed effects, `global_difference` removes period shocks;
/// the latter is only exact when every row of the network sums to one.
pub fn post_2sls(
    panel: &PanelData,
    w: &Network,
    demean_time: bool,
    global_difference: bool,
) -> Result<TwoSlsFit> {
    let (t, n, k) = (panel.t(), panel.n(), panel.k());
    if w.n() != n {
        return Err(Error::Invalid(format!(
            "network has {} units but the panel has {n}",
            w.n()
        )));
    }
    if k == 0 {
        return Err(Error::Invalid("at least one covariate is required".into()));
    }
    let p = 1 + 2 * k;
    let q = 3 * k;
    if t * n < p + 2 {
        return Err(Error::Invalid(format!(
            "{} observations cannot support {p} structural coefficients",
            t * n
        )));
    }
    if demean_time && t < 2 {
        return Err(Error::Invalid("time demeaning needs at least two periods".into()));
    }

    let wt = w.weights().transpose();
    let w2t = w.weights().transpose() * w.weights().transpose();

    // All variables live as T x N matrices (rows = periods) until stacking,
    // so both transforms act on whole columns/rows at once.
    let mut vars: Vec<DMatrix<f64>> = Vec::with_capacity(2 + 4 * k);
    vars.push(panel.y.clone()); // 0: y
    vars.push(&panel.y * &wt); // 1: Wy
    for kk in 0..k {
        vars.push(panel.x[kk].clone()); // 2 + 4kk: x_k
        vars.push(&panel.x[kk] * &wt); // 3 + 4kk: W x_k
        vars.push(&panel.x[kk] * &w2t); // 4 + 4kk: W^2 x_k
    }
    for v in &mut vars {
        if demean_time {
            demean_columns(v);
        }
        if global_difference {
            difference_rows(v);
        }
    }

    let nt = t * n;
    let mut y = DVector::zeros(nt);
    let mut xm = DMatrix::zeros(nt, p);
    let mut zm = DMatrix::zeros(nt, q);
    for tt in 0..t {
        for i in 0..n {
            let row = tt * n + i;
            y[row] = vars[0][(tt, i)];
            xm[(row, 0)] = vars[1][(tt, i)];
            for kk in 0..k {
                let x_ = vars[2 + 4 * kk][(tt, i)];
                let wx = vars[3 + 4 * kk][(tt, i)];
                let w2x = vars[4 + 4 * kk][(tt, i)];
                xm[(row, 1 + kk)] = x_;
                xm[(row, 1 + k + kk)] = wx;
                zm[(row, kk)] = x_;
                zm[(row, k + kk)] = wx;
                zm[(row, 2 * k + kk)] = w2x;
            }
        }
    }

    let szz = zm.transpose() * &zm;
    let szx = zm.transpose() * &xm;
    let szy = zm.transpose() * &y;
    let lu_zz = szz.lu();
    let a = lu_zz.solve(&szx).ok_or_else(|| {
        Error::Numerical(
            "instrument block (x, Wx, W^2x) is collinear; the network gives no \
             independent variation"
                .into(),
        )
    })?;
    let xpzx = szx.transpose() * &a; // p x p
    let xpzy = a.transpose() * &szy;
    let lu_x = xpzx.clone().lu();
    let theta = lu_x.solve(&xpzy).ok_or_else(|| {
        Error::Numerical(
            "projected regressor block (Wy, x, Wx) is collinear; effects are not \
             separately identified at this network"
                .into(),
        )
    })?;

    // Cluster by period: u_t = A' Z_t' e_t, V = bread (sum_t u_t u_t') bread.
    let resid = &y - &xm * &theta;
    let bread = lu_x
        .try_inverse()
        .ok_or_else(|| Error::Numerical("projected regressor block is singular".into()))?;
    let mut meat = DMatrix::zeros(p, p);
    for tt in 0..t {
        let mut zte = DVector::zeros(q);
        for i in 0..n {
            let row = tt * n + i;
            let e = resid[row];
            for c in 0..q {
                zte[c] += zm[(row, c)] * e;
            }
        }
        let u = a.transpose() * zte;
        meat += &u * u.transpose();
    }
    let cov = &bread * meat * &bread;

    let se = |j: usize| cov[(j, j)].max(0.0).sqrt();
    Ok(TwoSlsFit {
        rho: theta[0],
        beta: (0..k).map(|kk| theta[1 + kk]).collect(),
        gamma: (0..k).map(|kk| theta[1 + k + kk]).collect(),
        se_rho: se(0),
        se_beta: (0..k).map(|kk| se(1 + kk)).collect(),
        se_gamma: (0..k).map(|kk| se(1 + k + kk)).collect(),
        observations: nt,
    })
}
