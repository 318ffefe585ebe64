//! Moment conditions and the GMM objective.
//!
//! The estimating equations say that reduced-form residuals
//! `e_t = y_t - sum_k Pi_k x_kt` are orthogonal to the covariates (or to
//! supplied external instruments).  Averaging over periods first turns the
//! objective into a function of small cross-moment matrices,
//!
//! `M_l(theta) = C_ys[l] - sum_k Pi_k(theta) C_xs[k][l]`,
//!
//! so one evaluation costs a few `N^3` products regardless of `T`.  The
//! gradient is computed by the adjoint method from the same factorization,
//! which keeps the swarm and quasi-Newton stages cheap.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::params::StructuralParams;
use crate::reduced::solve_s;
use crate::DEFAULT_ZERO_TOL;

/// Which orthogonality conditions to impose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentSource {
    /// Residuals orthogonal to the model covariates themselves.
    Covariates,
    /// Residuals orthogonal to the panel's external instrument columns.
    Instruments,
}

/// Which rows of the network are pinned to sum to one during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    AllRows,
    OneRow(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub seed: u64,
    pub particle_count: usize,
    pub swarm_iterations: usize,
    pub swarm_inertia: f64,
    pub swarm_cognitive: f64,
    pub swarm_social: f64,
    /// Swarm iterations without improvement before stopping early.
    pub swarm_patience: usize,
    pub refine_max_iterations: usize,
    pub refine_gradient_tol: f64,
    /// Remove unit-specific intercepts by subtracting each unit's time mean.
    pub demean_time: bool,
    /// Project the cross-sectional mean out of the residual side of the
    /// moments, guarding against a period shock common to all units.  Exact
    /// under all-rows normalization, where the common shock passes through
    /// the equilibrium proportionally to the unit vector.
    pub shock_projection: bool,
    pub normalization: Normalization,
    pub moment_source: MomentSource,
    /// Optional positive semidefinite weighting of the stacked moment
    /// vector; identity when absent.  Not read from config files.
    #[serde(skip)]
    pub weight_matrix: Option<DMatrix<f64>>,
    pub zero_tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            particle_count: 100,
            swarm_iterations: 200,
            swarm_inertia: 0.7,
            swarm_cognitive: 1.5,
            swarm_social: 1.5,
            swarm_patience: 40,
            refine_max_iterations: 300,
            refine_gradient_tol: 1e-8,
            demean_time: false,
            shock_projection: false,
            normalization: Normalization::AllRows,
            moment_source: MomentSource::Covariates,
            weight_matrix: None,
            zero_tol: DEFAULT_ZERO_TOL,
        }
    }
}

/// Objective value returned when the evaluated point leaves the region
/// where `I - rho W` can be stably inverted.
pub const SENTINEL_OBJECTIVE: f64 = 1e12;

/// Cross-moment matrices of a (possibly transformed) panel.  Everything the
/// objective needs, with the time dimension already averaged out.
#[derive(Debug, Clone)]
pub struct MomentData {
    pub n: usize,
    pub t: usize,
    pub k: usize,
    /// Number of instrument blocks.
    pub blocks: usize,
    /// Per block `l`: `(1/T) sum_t y_t s_lt'`.
    c_ys: Vec<DMatrix<f64>>,
    /// Per covariate `k` and block `l`: `(1/T) sum_t x_kt s_lt'`.
    c_xs: Vec<Vec<DMatrix<f64>>>,
    /// Residual-side projector `I - 11'/N` when common-shock protection is
    /// on.
    projector: Option<DMatrix<f64>>,
    weight_matrix: Option<DMatrix<f64>>,
    /// Pooled least-squares slope of `y` on the covariates, used to anchor
    /// search starting points.
    pub beta_pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GmmGradient {
    pub rho: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Full matrix of partials; callers restrict to the coordinates they
    /// treat as free.
    pub w: DMatrix<f64>,
}

impl MomentData {
    pub fn from_panel(panel: &PanelData, cfg: &GmmConfig) -> Result<Self> {
        let panel = if cfg.demean_time {
            std::borrow::Cow::Owned(panel.demean_time()?)
        } else {
            std::borrow::Cow::Borrowed(panel)
        };
        let (t, n, k) = (panel.t(), panel.n(), panel.k());
        let instruments: Vec<&DMatrix<f64>> = match cfg.moment_source {
            MomentSource::Covariates => panel.x.iter().collect(),
            MomentSource::Instruments => {
                if panel.z.is_empty() {
                    return Err(Error::Invalid(
                        "instrument moments requested but the panel has no instrument columns"
                            .into(),
                    ));
                }
                panel.z.iter().collect()
            }
        };
        let blocks = instruments.len();
        if let Some(wm) = &cfg.weight_matrix {
            let dim = blocks * n * n;
            if wm.nrows() != dim || wm.ncols() != dim {
                return Err(Error::Dimension(format!(
                    "weight matrix is {}x{}, moment vector has length {}",
                    wm.nrows(),
                    wm.ncols(),
                    dim
                )));
            }
        }

        let scale = 1.0 / t as f64;
        let c_ys: Vec<DMatrix<f64>> = instruments
            .iter()
            .map(|s| (panel.y.transpose() * *s) * scale)
            .collect();
        let c_xs: Vec<Vec<DMatrix<f64>>> = (0..k)
            .map(|kk| {
                instruments
                    .iter()
                    .map(|s| (panel.x[kk].transpose() * *s) * scale)
                    .collect()
            })
            .collect();

        // Pooled slope: K x K normal equations over all observations.
        let mut xtx = DMatrix::zeros(k, k);
        let mut xty = DVector::zeros(k);
        for a in 0..k {
            for b in a..k {
                let v = panel.x[a].dot(&panel.x[b]);
                xtx[(a, b)] = v;
                xtx[(b, a)] = v;
            }
            xty[a] = panel.x[a].dot(&panel.y);
        }
        let beta_pooled = xtx
            .lu()
            .solve(&xty)
            .map(|b| b.iter().copied().collect())
            .unwrap_or_else(|| vec![0.0; k]);

        let projector = cfg.shock_projection.then(|| {
            DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64)
        });

        Ok(Self {
            n,
            t,
            k,
            blocks,
            c_ys,
            c_xs,
            projector,
            weight_matrix: cfg.weight_matrix.clone(),
            beta_pooled,
        })
    }

    /// Moment matrices `M_l(theta)` before any residual projection.
    fn raw_moment_matrices(
        &self,
        pi: &[DMatrix<f64>],
    ) -> Vec<DMatrix<f64>> {
        (0..self.blocks)
            .map(|l| {
                let mut m = self.c_ys[l].clone();
                for k in 0..self.k {
                    m -= &pi[k] * &self.c_xs[k][l];
                }
                m
            })
            .collect()
    }

    fn projected(&self, m: DMatrix<f64>) -> DMatrix<f64> {
        match &self.projector {
            Some(p) => p * m,
            None => m,
        }
    }

    /// Stacked moment vector at `theta` (column-major within each block).
    pub fn moment_vector(
        &self,
        rho: f64,
        beta: &[f64],
        gamma: &[f64],
        w: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let pi = self.reduced_pi(rho, beta, gamma, w)?;
        let mut g = DVector::zeros(self.blocks * self.n * self.n);
        for (l, m) in self.raw_moment_matrices(&pi).into_iter().enumerate() {
            let pm = self.projected(m);
            g.rows_mut(l * self.n * self.n, self.n * self.n)
                .copy_from_slice(pm.as_slice());
        }
        Ok(g)
    }

    fn reduced_pi(
        &self,
        rho: f64,
        beta: &[f64],
        gamma: &[f64],
        w: &DMatrix<f64>,
    ) -> Result<Vec<DMatrix<f64>>> {
        let solved = solve_s(rho, w)?;
        Ok((0..self.k)
            .map(|k| {
                let mut b = w * gamma[k];
                for i in 0..self.n {
                    b[(i, i)] += beta[k];
                }
                &solved.inv * b
            })
            .collect())
    }

    /// Objective value, with a large sentinel (scaled by how far the point
    /// is outside the invertibility region) when `I - rho W` cannot be
    /// stably inverted.
    pub fn objective(&self, rho: f64, beta: &[f64], gamma: &[f64], w: &DMatrix<f64>) -> f64 {
        match self.objective_grad_impl(rho, beta, gamma, w, false) {
            Ok((f, _)) => f,
            Err(excess) => SENTINEL_OBJECTIVE * (1.0 + excess),
        }
    }

    /// Objective and gradient together; the gradient is zero at sentinel
    /// points, which makes any line search retreat into the feasible
    /// region.
    pub fn objective_with_grad(
        &self,
        rho: f64,
        beta: &[f64],
        gamma: &[f64],
        w: &DMatrix<f64>,
    ) -> (f64, GmmGradient) {
        match self.objective_grad_impl(rho, beta, gamma, w, true) {
            Ok((f, g)) => (f, g.expect("gradient requested")),
            Err(excess) => (
                SENTINEL_OBJECTIVE * (1.0 + excess),
                GmmGradient {
                    rho: 0.0,
                    beta: vec![0.0; self.k],
                    gamma: vec![0.0; self.k],
                    w: DMatrix::zeros(self.n, self.n),
                },
            ),
        }
    }

    /// Err carries the "excess" used to scale the sentinel.
    fn objective_grad_impl(
        &self,
        rho: f64,
        beta: &[f64],
        gamma: &[f64],
        w: &DMatrix<f64>,
        want_grad: bool,
    ) -> std::result::Result<(f64, Option<GmmGradient>), f64> {
        assert_eq!(beta.len(), self.k);
        assert_eq!(gamma.len(), self.k);

        let row_norm = crate::reduced::rho_w_row_norm(rho, w);
        if !rho.is_finite() || row_norm >= 1.0 - 1e-9 {
            return Err((row_norm - 1.0).max(0.0).min(1e3) + rho.abs().min(1e3));
        }
        let solved = match solve_s(rho, w) {
            Ok(s) => s,
            Err(_) => return Err(1.0),
        };
        let pi: Vec<DMatrix<f64>> = (0..self.k)
            .map(|k| {
                let mut b = w * gamma[k];
                for i in 0..self.n {
                    b[(i, i)] += beta[k];
                }
                &solved.inv * b
            })
            .collect();

        let raw = self.raw_moment_matrices(&pi);
        let projected: Vec<DMatrix<f64>> = raw.into_iter().map(|m| self.projected(m)).collect();

        // Backpropagated moment matrices: identity weighting keeps them as
        // the projected moments, a general weight matrix reshapes `A g`.
        let (value, back): (f64, Vec<DMatrix<f64>>) = match &self.weight_matrix {
            None => {
                let value = projected.iter().map(|m| m.norm_squared()).sum();
                (value, projected)
            }
            Some(a) => {
                let nn = self.n * self.n;
                let mut g = DVector::zeros(self.blocks * nn);
                for (l, m) in projected.iter().enumerate() {
                    g.rows_mut(l * nn, nn).copy_from_slice(m.as_slice());
                }
                let ag = a * &g;
                let value = g.dot(&ag);
                let back = (0..self.blocks)
                    .map(|l| {
                        let m = DMatrix::from_column_slice(
                            self.n,
                            self.n,
                            ag.rows(l * nn, nn).as_slice(),
                        );
                        self.projected(m)
                    })
                    .collect();
                (value, back)
            }
        };

        if !want_grad {
            return Ok((value, None));
        }

        let inv_t = solved.inv.transpose();
        let mut grad_rho = 0.0;
        let mut grad_beta = vec![0.0; self.k];
        let mut grad_gamma = vec![0.0; self.k];
        let mut grad_w = DMatrix::zeros(self.n, self.n);
        for k in 0..self.k {
            let mut d = DMatrix::zeros(self.n, self.n);
            for l in 0..self.blocks {
                d += &back[l] * self.c_xs[k][l].transpose();
            }
            let g_k = &inv_t * d;
            grad_beta[k] = -2.0 * g_k.trace();
            grad_gamma[k] = -2.0 * g_k.dot(w);
            grad_rho += -2.0 * g_k.dot(&(w * &pi[k]));
            grad_w += (&g_k * gamma[k] + (&g_k * pi[k].transpose()) * rho) * -2.0;
        }

        Ok((
            value,
            Some(GmmGradient {
                rho: grad_rho,
                beta: grad_beta,
                gamma: grad_gamma,
                w: grad_w,
            }),
        ))
    }
}

/// Stacked moment vector of a panel at a parameter point, without any
/// transforms or residual projection: block `l` holds
/// `vec((1/T) sum_t e_t s_lt')` column by column, where `e_t` are the
/// reduced-form residuals.
pub fn gmm_moments(
    theta: &StructuralParams,
    panel: &PanelData,
    source: MomentSource,
) -> Result<DVector<f64>> {
    if panel.n() != theta.n() {
        return Err(Error::Dimension(format!(
            "panel has {} units, parameters have {}",
            panel.n(),
            theta.n()
        )));
    }
    if panel.k() != theta.k() {
        return Err(Error::Dimension(format!(
            "panel has {} covariates, parameters have {}",
            panel.k(),
            theta.k()
        )));
    }
    let cfg = GmmConfig {
        moment_source: source,
        ..GmmConfig::default()
    };
    let data = MomentData::from_panel(panel, &cfg)?;
    data.moment_vector(
        theta.rho,
        &theta.beta,
        &theta.gamma,
        theta.network.weights(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use crate::rng::derive_rng;
    use crate::simulate::{simulate_panel, ShockConfig};
    use approx::assert_abs_diff_eq;

    fn worked_example() -> StructuralParams {
        let w = Network::new(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ))
        .unwrap();
        StructuralParams::univariate(w, 0.3, 0.4, 0.5).unwrap()
    }

    #[test]
    fn moments_vanish_at_truth_on_noiseless_data() {
        let theta = worked_example();
        let panel = simulate_panel(&theta, 40, &ShockConfig::noiseless(9)).unwrap();
        let g = gmm_moments(&theta, &panel, MomentSource::Covariates).unwrap();
        assert_eq!(g.len(), 9);
        assert!(g.amax() < 1e-12, "max moment {}", g.amax());
    }

    #[test]
    fn moment_ordering_is_column_major_per_block() {
        // Two units, one covariate, two periods; everything computed by
        // direct summation.
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let x = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let panel = PanelData::new(y.clone(), vec![x.clone()], vec![]).unwrap();
        let theta = StructuralParams::univariate(Network::empty(2), 0.0, 0.0, 0.0).unwrap();
        // With Pi = 0 the moment matrix is just (1/T) sum_t y_t x_t'.
        let g = gmm_moments(&theta, &panel, MomentSource::Covariates).unwrap();
        let mut m = DMatrix::zeros(2, 2);
        for t in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    m[(i, j)] += y[(t, i)] * x[(t, j)] / 2.0;
                }
            }
        }
        // Column-major stacking: g[i + 2 j] = m[(i, j)].
        for j in 0..2 {
            for i in 0..2 {
                assert_abs_diff_eq!(g[i + 2 * j], m[(i, j)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn objective_is_zero_at_truth_and_positive_elsewhere() {
        let theta = worked_example();
        let panel = simulate_panel(&theta, 60, &ShockConfig::noiseless(4)).unwrap();
        let data = MomentData::from_panel(&panel, &GmmConfig::default()).unwrap();
        let w = theta.network.weights();
        let at_truth = data.objective(theta.rho, &theta.beta, &theta.gamma, w);
        assert!(at_truth < 1e-20, "objective at truth {at_truth}");
        let off = data.objective(0.1, &theta.beta, &theta.gamma, w);
        assert!(off > 1e-4);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = derive_rng(21, &[0]);
        for draw in 0..5 {
            let theta = crate::params::random_admissible_params(&mut rng, 4, 2);
            let shocks = ShockConfig {
                seed: 100 + draw,
                ..ShockConfig::default()
            };
            let panel = simulate_panel(&theta, 30, &shocks).unwrap();
            let cfg = GmmConfig {
                shock_projection: draw % 2 == 0,
                ..GmmConfig::default()
            };
            let data = MomentData::from_panel(&panel, &cfg).unwrap();

            // Evaluate at a perturbed point so the gradient is not trivially
            // zero.
            let rho = theta.rho * 0.8;
            let beta: Vec<f64> = theta.beta.iter().map(|b| b + 0.1).collect();
            let gamma: Vec<f64> = theta.gamma.iter().map(|g| g - 0.05).collect();
            let w = theta.network.weights().clone() * 0.9;

            let (_, grad) = data.objective_with_grad(rho, &beta, &gamma, &w);
            let h = 1e-6;

            let fd = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);

            let d_rho = fd(
                data.objective(rho + h, &beta, &gamma, &w),
                data.objective(rho - h, &beta, &gamma, &w),
            );
            assert_abs_diff_eq!(grad.rho, d_rho, epsilon = 1e-5 * (1.0 + d_rho.abs()));

            for k in 0..2 {
                let mut bp = beta.clone();
                bp[k] += h;
                let mut bm = beta.clone();
                bm[k] -= h;
                let d = fd(
                    data.objective(rho, &bp, &gamma, &w),
                    data.objective(rho, &bm, &gamma, &w),
                );
                assert_abs_diff_eq!(grad.beta[k], d, epsilon = 1e-5 * (1.0 + d.abs()));

                let mut gp = gamma.clone();
                gp[k] += h;
                let mut gm = gamma.clone();
                gm[k] -= h;
                let d = fd(
                    data.objective(rho, &beta, &gp, &w),
                    data.objective(rho, &beta, &gm, &w),
                );
                assert_abs_diff_eq!(grad.gamma[k], d, epsilon = 1e-5 * (1.0 + d.abs()));
            }

            for (i, j) in [(0, 1), (1, 3), (2, 0), (3, 2)] {
                let mut wp = w.clone();
                wp[(i, j)] += h;
                let mut wm = w.clone();
                wm[(i, j)] -= h;
                let d = fd(
                    data.objective(rho, &beta, &gamma, &wp),
                    data.objective(rho, &beta, &gamma, &wm),
                );
                assert_abs_diff_eq!(grad.w[(i, j)], d, epsilon = 1e-5 * (1.0 + d.abs()));
            }
        }
    }

    #[test]
    fn sentinel_fires_outside_the_invertible_region() {
        let theta = worked_example();
        let panel = simulate_panel(&theta, 20, &ShockConfig::noiseless(3)).unwrap();
        let data = MomentData::from_panel(&panel, &GmmConfig::default()).unwrap();
        let w = theta.network.weights();
        let f = data.objective(1.0, &theta.beta, &theta.gamma, w);
        assert!(f >= SENTINEL_OBJECTIVE);
        let (f2, g) = data.objective_with_grad(1.2, &theta.beta, &theta.gamma, w);
        assert!(f2 >= SENTINEL_OBJECTIVE);
        assert_eq!(g.rho, 0.0);
    }

    #[test]
    fn residual_projection_absorbs_common_period_shocks() {
        // All-rows-normalized network, pure common shocks: the projected
        // moments vanish at the truth while the raw ones do not.
        let w = Network::new(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 0.5, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        ))
        .unwrap();
        let theta = StructuralParams::univariate(w, 0.4, 1.0, 0.6).unwrap();
        let shocks = ShockConfig {
            unit_effects: false,
            noise_scale: 0.0,
            seed: 17,
            ..ShockConfig::default()
        };
        let panel = simulate_panel(&theta, 50, &shocks).unwrap();

        let plain = MomentData::from_panel(&panel, &GmmConfig::default()).unwrap();
        let projected = MomentData::from_panel(
            &panel,
            &GmmConfig {
                shock_projection: true,
                ..GmmConfig::default()
            },
        )
        .unwrap();
        let wts = theta.network.weights();
        let f_plain = plain.objective(theta.rho, &theta.beta, &theta.gamma, wts);
        let f_proj = projected.objective(theta.rho, &theta.beta, &theta.gamma, wts);
        assert!(f_plain > 1e-3, "common shocks should bias raw moments: {f_plain}");
        assert!(f_proj < 1e-20, "projection should absorb them: {f_proj}");
    }

    #[test]
    fn weight_matrix_reweights_the_objective() {
        let theta = worked_example();
        let panel = simulate_panel(
            &theta,
            30,
            &ShockConfig {
                seed: 5,
                ..ShockConfig::default()
            },
        )
        .unwrap();
        let id_cfg = GmmConfig::default();
        let data_id = MomentData::from_panel(&panel, &id_cfg).unwrap();
        let scaled_cfg = GmmConfig {
            weight_matrix: Some(DMatrix::identity(9, 9) * 2.0),
            ..GmmConfig::default()
        };
        let data_scaled = MomentData::from_panel(&panel, &scaled_cfg).unwrap();
        let w = theta.network.weights();
        let f1 = data_id.objective(0.2, &theta.beta, &theta.gamma, w);
        let f2 = data_scaled.objective(0.2, &theta.beta, &theta.gamma, w);
        assert_abs_diff_eq!(f2, 2.0 * f1, epsilon = 1e-10 * f1.abs());

        // Gradient consistency under the weight matrix.
        let (_, grad) = data_scaled.objective_with_grad(0.2, &theta.beta, &theta.gamma, w);
        let h = 1e-6;
        let d = (data_scaled.objective(0.2 + h, &theta.beta, &theta.gamma, w)
            - data_scaled.objective(0.2 - h, &theta.beta, &theta.gamma, w))
            / (2.0 * h);
        assert_abs_diff_eq!(grad.rho, d, epsilon = 1e-4 * (1.0 + d.abs()));
    }

    #[test]
    fn instrument_moments_need_instrument_columns() {
        let theta = worked_example();
        let panel = simulate_panel(&theta, 10, &ShockConfig::noiseless(1)).unwrap();
        assert!(gmm_moments(&theta, &panel, MomentSource::Instruments).is_err());
    }
}
