//! Equation-by-equation least squares for the reduced form.
//!
//! Every unit's outcome is regressed on all units' covariates; the
//! coefficient on unit `j`'s covariate `k` in equation `i` is the
//! reduced-form entry `Pi_k[(i, j)]`.  The design is shared across
//! equations, so the Gram matrix is factored once.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::reduced::ReducedForm;

#[derive(Debug, Clone)]
pub struct OlsReducedForm {
    pub pi: ReducedForm,
    /// Per-period regression residuals, `T x N` (column `i` = equation `i`).
    pub residuals: DMatrix<f64>,
    /// Shared design Gram matrix `sum_t d_t d_t'` with `d_t` stacking all
    /// units' covariates, covariate-major (`NK x NK`).
    pub gram: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Column layout of the shared design: covariate block `k` holds units
/// `0..N`, so column `k * N + j` is covariate `k` of unit `j`.
fn design_matrix(panel: &PanelData) -> DMatrix<f64> {
    let (t, n, k) = (panel.t(), panel.n(), panel.k());
    let mut d = DMatrix::zeros(t, n * k);
    for kk in 0..k {
        for j in 0..n {
            d.set_column(kk * n + j, &panel.x[kk].column(j));
        }
    }
    d
}

pub fn estimate_ols_reduced_form(panel: &PanelData) -> Result<OlsReducedForm> {
    let (t, n, k) = (panel.t(), panel.n(), panel.k());
    let p = n * k;
    if t < p + 2 {
        return Err(Error::Invalid(format!(
            "reduced-form regression needs at least {} periods for {} coefficients per equation, got {}",
            p + 2,
            p,
            t
        )));
    }
    let mut warnings = Vec::new();
    if t < 10 * n {
        warnings.push(format!(
            "only {t} periods for {n} units; reduced-form estimates will be noisy"
        ));
    }

    let d = design_matrix(panel);
    let gram = d.transpose() * &d;
    let rhs = d.transpose() * &panel.y; // p x N
    let lu = gram.clone().lu();
    let coef = lu.solve(&rhs).ok_or_else(|| {
        Error::Numerical("covariate design is collinear; reduced form not identified".into())
    })?;

    let residuals = &panel.y - &d * &coef;

    let mut pi = Vec::with_capacity(k);
    for kk in 0..k {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = coef[(kk * n + j, i)];
            }
        }
        pi.push(m);
    }

    Ok(OlsReducedForm {
        pi: ReducedForm { pi },
        residuals,
        gram,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use crate::params::StructuralParams;
    use crate::reduced::reduced_form;
    use crate::simulate::{simulate_panel, ShockConfig};

    fn ring_params(k: usize) -> StructuralParams {
        let mut w = DMatrix::zeros(4, 4);
        for i in 0..4 {
            w[(i, (i + 1) % 4)] = 1.0;
        }
        let beta: Vec<f64> = (0..k).map(|i| 0.5 + 0.3 * i as f64).collect();
        let gamma: Vec<f64> = (0..k).map(|i| 0.4 - 0.2 * i as f64).collect();
        StructuralParams::new(Network::new(w).unwrap(), 0.35, beta, gamma).unwrap()
    }

    #[test]
    fn noiseless_panel_reproduces_the_reduced_form_exactly() {
        let theta = ring_params(2);
        let panel = simulate_panel(&theta, 60, &ShockConfig::noiseless(4)).unwrap();
        let fit = estimate_ols_reduced_form(&panel).unwrap();
        let truth = reduced_form(&theta).unwrap();
        for k in 0..2 {
            assert!(
                (&fit.pi.pi[k] - &truth.pi[k]).amax() < 1e-8,
                "covariate {k} deviates by {}",
                (&fit.pi.pi[k] - &truth.pi[k]).amax()
            );
        }
        assert!(fit.residuals.amax() < 1e-8);
    }

    #[test]
    fn noisy_panel_converges_with_more_periods() {
        let theta = ring_params(1);
        let shocks = |seed| ShockConfig {
            unit_effects: false,
            time_effects: false,
            noise_scale: 0.5,
            seed,
            ..ShockConfig::default()
        };
        let truth = reduced_form(&theta).unwrap();
        let small = estimate_ols_reduced_form(
            &simulate_panel(&theta, 60, &shocks(1)).unwrap(),
        )
        .unwrap();
        let large = estimate_ols_reduced_form(
            &simulate_panel(&theta, 4000, &shocks(2)).unwrap(),
        )
        .unwrap();
        let err_small = (&small.pi.pi[0] - &truth.pi[0]).amax();
        let err_large = (&large.pi.pi[0] - &truth.pi[0]).amax();
        assert!(err_large < err_small);
        assert!(err_large < 0.05, "large-sample error {err_large}");
    }

    #[test]
    fn too_few_periods_is_an_input_error() {
        let theta = ring_params(2);
        let panel = simulate_panel(&theta, 9, &ShockConfig::noiseless(1)).unwrap();
        // Needs at least N*K + 2 = 10 periods.
        let err = estimate_ols_reduced_form(&panel).unwrap_err();
        assert!(err.is_input_error());
    }

    #[test]
    fn short_panels_warn_about_noise() {
        let theta = ring_params(1);
        let panel = simulate_panel(&theta, 20, &ShockConfig::noiseless(1)).unwrap();
        let fit = estimate_ols_reduced_form(&panel).unwrap();
        assert!(!fit.warnings.is_empty());
        let long = simulate_panel(&theta, 40, &ShockConfig::noiseless(1)).unwrap();
        assert!(estimate_ols_reduced_form(&long).unwrap().warnings.is_empty());
    }

    #[test]
    fn collinear_covariates_are_rejected() {
        let theta = ring_params(1);
        let mut panel = simulate_panel(&theta, 50, &ShockConfig::noiseless(3)).unwrap();
        // Make unit 1's covariate a copy of unit 0's.
        let col0 = panel.x[0].column(0).clone_owned();
        panel.x[0].set_column(1, &col0);
        let err = estimate_ols_reduced_form(&panel).unwrap_err();
        assert!(!err.is_input_error());
    }
}
