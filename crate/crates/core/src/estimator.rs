//! Two-stage adaptive elastic net GMM for joint recovery of the network
//! and effect parameters.
//!
//! Stage 1 minimizes the moment objective plus an elastic-net penalty on
//! the network weights, with the search seeded by gradient- and
//! regression-screened particles and globalized by a masked particle
//! swarm.  Stage 2 re-minimizes with entries the first stage set to zero
//! held at zero and the L1 term reweighted by the inverse first-stage
//! magnitudes, which undoes the uniform-penalty bias on the surviving
//! edges.  Both stages estimate over a penalty grid and a BIC-type
//! criterion picks the final point.
//!
//! Row normalization is enforced by substitution: in each constrained row
//! the support entry closest to the diagonal is written as one minus the
//! rest, and the remaining free entries are squared so they cannot change
//! sign.  The feedback strength is squared as well.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GmmConfig, MomentData, Normalization};
use crate::lasso::lasso;
use crate::lbfgs::{minimize, LbfgsOptions, LbfgsOutcome};
use crate::network::Network;
use crate::panel::PanelData;
use crate::params::StructuralParams;
use crate::rng::derive_rng;
use crate::swarm::{run_swarm, SwarmOptions, SwarmParticle};
use crate::twosls::{post_2sls, TwoSlsFit};

/// Entries below this after stage 1 are treated as exact zeros rather than
/// reweighted, keeping the stage-2 problem well scaled.
const STAGE2_SUPPORT_TOL: f64 = 1e-6;
/// Floor on the magnitude used for adaptive weights, again for scaling.
const ADAPTIVE_FLOOR: f64 = 1e-3;
const ADAPTIVE_EXPONENT_DEFAULT: f64 = 2.5;
/// Smoothing half-width for the absolute value of substituted entries.
const PIVOT_ABS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub grid_l1: Vec<f64>,
    pub grid_l1_adaptive: Vec<f64>,
    pub grid_l2: Vec<f64>,
    /// Exponent on inverse first-stage magnitudes in the stage-2 weights.
    pub adaptive_exponent: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        let grid = vec![0.0, 0.025, 0.05, 0.10];
        Self {
            grid_l1: grid.clone(),
            grid_l1_adaptive: grid.clone(),
            grid_l2: grid,
            adaptive_exponent: ADAPTIVE_EXPONENT_DEFAULT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPointLog {
    pub l1: f64,
    pub l1_adaptive: f64,
    pub l2: f64,
    pub stage1_objective: f64,
    pub stage2_objective: f64,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub stage1_monotone: bool,
    pub stage2_monotone: bool,
    pub swarm_iterations: usize,
    pub support_size: usize,
    pub moment_norm: f64,
    pub bic: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: StructuralParams,
    /// First-stage estimate at the selected penalty point.
    pub stage1_theta: StructuralParams,
    pub chosen_penalty: (f64, f64, f64),
    pub bic_value: f64,
    /// Moment norm `g'g` at the final estimate (fit only, no penalty).
    pub moment_norm: f64,
    /// `true` marks an off-diagonal entry estimated as zero.
    pub zero_pattern: Vec<Vec<bool>>,
    pub post_estimate: Option<TwoSlsFit>,
    pub convergence_log: Vec<GridPointLog>,
    pub warnings: Vec<String>,
}

/// A labeled starting point for the swarm, in structural form.
#[derive(Debug, Clone)]
pub struct InitialCandidate {
    pub label: String,
    pub params: StructuralParams,
}

// ---------------------------------------------------------------------------
// Substituted parameterization over an explicit support.

/// Free-coordinate layout: `[rho_tilde, beta.., gamma.., x_ij..]` where
/// `rho = rho_tilde^2` and `W_ij = x_ij^2` for non-pivot support entries.
#[derive(Debug, Clone)]
struct SupportParam {
    n: usize,
    k: usize,
    /// Support entries in row-major order, pivots included.
    support: Vec<(usize, usize)>,
    /// Pivot entry per row, where that row is constrained to sum to one.
    pivots: Vec<Option<(usize, usize)>>,
    /// Support entries that are free coordinates (support minus pivots).
    free: Vec<(usize, usize)>,
}

impl SupportParam {
    fn new(n: usize, k: usize, support: &[(usize, usize)], normalization: Normalization) -> Self {
        let mut support: Vec<(usize, usize)> = support.to_vec();
        support.sort_unstable();
        support.dedup();
        let mut pivots = vec![None; n];
        for i in 0..n {
            let constrained = match normalization {
                Normalization::AllRows => true,
                Normalization::OneRow(r) => i == r,
            };
            if !constrained {
                continue;
            }
            // Entry nearest the diagonal, ties to the smaller column.
            pivots[i] = support
                .iter()
                .filter(|(r, _)| *r == i)
                .min_by_key(|(_, j)| (j.abs_diff(i), *j))
                .copied();
        }
        let free = support
            .iter()
            .filter(|e| !pivots.contains(&Some(**e)))
            .copied()
            .collect();
        Self {
            n,
            k,
            support,
            pivots,
            free,
        }
    }

    fn dim(&self) -> usize {
        1 + 2 * self.k + self.free.len()
    }

    /// Builds `(rho, beta, gamma, W)` from the free vector.
    fn decode(&self, v: &DVector<f64>) -> (f64, Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let rho = v[0] * v[0];
        let beta: Vec<f64> = (0..self.k).map(|k| v[1 + k]).collect();
        let gamma: Vec<f64> = (0..self.k).map(|k| v[1 + self.k + k]).collect();
        let mut w = DMatrix::zeros(self.n, self.n);
        for (idx, &(i, j)) in self.free.iter().enumerate() {
            let x = v[1 + 2 * self.k + idx];
            w[(i, j)] = x * x;
        }
        for (i, pivot) in self.pivots.iter().enumerate() {
            if let Some((pi, pj)) = pivot {
                debug_assert_eq!(*pi, i);
                let others: f64 = self
                    .support
                    .iter()
                    .filter(|(r, c)| *r == i && (*r, *c) != (*pi, *pj))
                    .map(|&(r, c)| w[(r, c)])
                    .sum();
                w[(*pi, *pj)] = 1.0 - others;
            }
        }
        (rho, beta, gamma, w)
    }

    /// Encodes a parameter point; `W` must be non-negative off the pivots.
    fn encode(&self, rho: f64, beta: &[f64], gamma: &[f64], w: &DMatrix<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v[0] = rho.max(0.0).sqrt();
        for k in 0..self.k {
            v[1 + k] = beta[k];
            v[1 + self.k + k] = gamma[k];
        }
        for (idx, &(i, j)) in self.free.iter().enumerate() {
            v[1 + 2 * self.k + idx] = w[(i, j)].max(0.0).sqrt();
        }
        v
    }

    /// Chains the dense gradient back to the free coordinates.
    fn chain_gradient(
        &self,
        v: &DVector<f64>,
        grad_rho: f64,
        grad_beta: &[f64],
        grad_gamma: &[f64],
        grad_w: &DMatrix<f64>,
        out: &mut DVector<f64>,
    ) {
        out[0] = 2.0 * v[0] * grad_rho;
        for k in 0..self.k {
            out[1 + k] = grad_beta[k];
            out[1 + self.k + k] = grad_gamma[k];
        }
        for (idx, &(i, j)) in self.free.iter().enumerate() {
            let x = v[1 + 2 * self.k + idx];
            let mut d = grad_w[(i, j)];
            if let Some((pi, pj)) = self.pivots[i] {
                // The pivot in this row absorbs minus the change.
                d -= grad_w[(pi, pj)];
            }
            out[1 + 2 * self.k + idx] = 2.0 * x * d;
        }
    }
}

// ---------------------------------------------------------------------------
// Penalties.

#[derive(Debug, Clone)]
enum Penalty {
    /// `l1 * sum |W|  +  l2 * sum W^2` over the support.
    Plain { l1: f64, l2: f64 },
    /// `l1 * sum a_ij |W_ij|  +  l2 * sum W^2` with fixed weights.
    Adaptive {
        l1: f64,
        l2: f64,
        weights: DMatrix<f64>,
    },
}

impl Penalty {
    /// Value and accumulated dense gradient.  The absolute value is
    /// smoothed; only substituted entries can actually sit at a kink.
    fn add(&self, param: &SupportParam, w: &DMatrix<f64>, grad_w: Option<&mut DMatrix<f64>>) -> f64 {
        let (l1, l2, weights) = match self {
            Penalty::Plain { l1, l2 } => (*l1, *l2, None),
            Penalty::Adaptive { l1, l2, weights } => (*l1, *l2, Some(weights)),
        };
        let mut value = 0.0;
        let mut grad = grad_w;
        for &(i, j) in &param.support {
            let wij = w[(i, j)];
            let a = weights.map_or(1.0, |m| m[(i, j)]);
            let smooth_abs = (wij * wij + PIVOT_ABS_EPS * PIVOT_ABS_EPS).sqrt();
            value += l1 * a * smooth_abs + l2 * wij * wij;
            if let Some(g) = grad.as_deref_mut() {
                g[(i, j)] += l1 * a * wij / smooth_abs + 2.0 * l2 * wij;
            }
        }
        value
    }
}

// ---------------------------------------------------------------------------
// Screening and particle construction.

struct ScreenOutput {
    /// Positive part of minus the fit gradient in each off-diagonal entry.
    scores: DMatrix<f64>,
    degenerate: bool,
}

fn gradient_screen(data: &MomentData, n: usize) -> ScreenOutput {
    let beta = data.beta_pooled.clone();
    let gamma = vec![0.0; data.k];
    let w0 = DMatrix::zeros(n, n);
    let (_, grad) = data.objective_with_grad(0.5, &beta, &gamma, &w0);
    let mut scores = DMatrix::zeros(n, n);
    let mut any_positive = false;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let s = -grad.w[(i, j)];
                if s > 0.0 {
                    scores[(i, j)] = s;
                    any_positive = true;
                }
            }
        }
    }
    ScreenOutput {
        scores,
        degenerate: !any_positive,
    }
}

/// Dense swarm coordinate layout mirrors the free layout but keeps every
/// off-diagonal entry: `[rho_tilde, beta.., gamma.., wtilde_ij..]`.
fn offdiag_entries(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                v.push((i, j));
            }
        }
    }
    v
}

struct SwarmSpace {
    n: usize,
    k: usize,
    entries: Vec<(usize, usize)>,
}

impl SwarmSpace {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            entries: offdiag_entries(n),
        }
    }

    fn dim(&self) -> usize {
        1 + 2 * self.k + self.entries.len()
    }

    /// Decodes a swarm position into a structural point, normalizing the
    /// constrained rows exactly.
    fn decode(
        &self,
        v: &DVector<f64>,
        mask: &[bool],
        normalization: Normalization,
    ) -> (f64, Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let rho = v[0] * v[0];
        let beta: Vec<f64> = (0..self.k).map(|k| v[1 + k]).collect();
        let gamma: Vec<f64> = (0..self.k).map(|k| v[1 + self.k + k]).collect();
        let mut w = DMatrix::zeros(self.n, self.n);
        for (idx, &(i, j)) in self.entries.iter().enumerate() {
            let slot = 1 + 2 * self.k + idx;
            if mask[slot] {
                let x = v[slot];
                w[(i, j)] = x * x;
            }
        }
        for i in 0..self.n {
            let constrained = match normalization {
                Normalization::AllRows => true,
                Normalization::OneRow(r) => i == r,
            };
            if !constrained {
                continue;
            }
            let sum: f64 = w.row(i).sum();
            if sum > 1e-12 {
                for j in 0..self.n {
                    w[(i, j)] /= sum;
                }
            }
        }
        (rho, beta, gamma, w)
    }

    fn mask_for(&self, support: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let mut mask = vec![true; self.dim()];
        for (idx, &(i, j)) in self.entries.iter().enumerate() {
            mask[1 + 2 * self.k + idx] = support(i, j);
        }
        mask
    }

    /// Particle at the given network weights (entries in `[0, 1]`).
    fn particle(
        &self,
        rho: f64,
        beta: &[f64],
        gamma: &[f64],
        w: &DMatrix<f64>,
        mask: Vec<bool>,
    ) -> SwarmParticle {
        let mut pos = DVector::zeros(self.dim());
        pos[0] = rho.max(0.0).sqrt();
        for k in 0..self.k {
            pos[1 + k] = beta[k];
            pos[1 + self.k + k] = gamma[k];
        }
        for (idx, &(i, j)) in self.entries.iter().enumerate() {
            pos[1 + 2 * self.k + idx] = w[(i, j)].max(0.0).sqrt();
        }
        SwarmParticle {
            position: pos,
            mask,
        }
    }
}

fn row_normalized(mut w: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..w.nrows() {
        let sum: f64 = w.row(i).sum();
        if sum > 1e-12 {
            for j in 0..w.ncols() {
                w[(i, j)] /= sum;
            }
        }
    }
    w
}

struct ParticleSet {
    particles: Vec<SwarmParticle>,
    labels: Vec<String>,
    warnings: Vec<String>,
}

fn build_particles(
    space: &SwarmSpace,
    data: &MomentData,
    panel: &PanelData,
    screen: &ScreenOutput,
    l1: f64,
) -> ParticleSet {
    let n = space.n;
    let mut warnings = Vec::new();
    let beta0 = &data.beta_pooled;
    let gamma0 = vec![0.0; space.k];
    let mut particles = Vec::new();
    let mut labels = Vec::new();

    let scores = if screen.degenerate {
        warnings.push(
            "gradient screen found no promising entries; screened starts fall back to uniform dense weights"
                .to_string(),
        );
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
    } else {
        screen.scores.clone()
    };

    let mut push = |label: &str, w: DMatrix<f64>, mask: Vec<bool>| {
        particles.push(space.particle(0.5, beta0, &gamma0, &w, mask));
        labels.push(label.to_string());
    };

    // Screened support at the penalty threshold, equal weights.
    let over_l1 = DMatrix::from_fn(n, n, |i, j| {
        if i != j && scores[(i, j)] > l1 {
            1.0
        } else {
            0.0
        }
    });
    push(
        "screen-threshold-equal",
        row_normalized(over_l1.clone()),
        space.mask_for(|i, j| over_l1[(i, j)] > 0.0),
    );

    // Same support, weights proportional to the screen scores.
    let proportional = DMatrix::from_fn(n, n, |i, j| {
        if over_l1[(i, j)] > 0.0 {
            scores[(i, j)]
        } else {
            0.0
        }
    });
    push(
        "screen-threshold-proportional",
        row_normalized(proportional),
        space.mask_for(|i, j| over_l1[(i, j)] > 0.0),
    );

    // Any positive screen score, equal weights.
    let positive = DMatrix::from_fn(n, n, |i, j| {
        if i != j && scores[(i, j)] > 0.0 {
            1.0
        } else {
            0.0
        }
    });
    push(
        "screen-positive-equal",
        row_normalized(positive.clone()),
        space.mask_for(|i, j| positive[(i, j)] > 0.0),
    );

    // Top 5% of entries by screen score.
    let mut ranked: Vec<(usize, usize)> = space
        .entries
        .iter()
        .copied()
        .filter(|&(i, j)| scores[(i, j)] > 0.0)
        .collect();
    ranked.sort_by(|a, b| {
        scores[(b.0, b.1)]
            .partial_cmp(&scores[(a.0, a.1)])
            .unwrap()
            .then(a.cmp(b))
    });
    let keep = ((0.05 * (n * (n - 1)) as f64).ceil() as usize).min(ranked.len());
    let mut top = DMatrix::zeros(n, n);
    for &(i, j) in ranked.iter().take(keep) {
        top[(i, j)] = 1.0;
    }
    push(
        "screen-top-share",
        row_normalized(top.clone()),
        space.mask_for(|i, j| top[(i, j)] > 0.0),
    );

    // Per-row lasso of each unit's outcome on the other units' outcomes,
    // and on the other units' first covariate.
    for (label, source) in [
        ("lasso-on-outcomes", &panel.y),
        ("lasso-on-covariates", &panel.x[0]),
    ] {
        let t = panel.t();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            let response: DVector<f64> = panel.y.column(i).clone_owned();
            let mut design = DMatrix::zeros(t, n - 1);
            let mut cols = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j != i {
                    cols.push(j);
                    design.set_column(cols.len() - 1, &source.column(j));
                }
            }
            let coef = lasso(&design, &response, l1.max(1e-4), 500, 1e-8);
            for (c, &j) in cols.iter().enumerate() {
                w[(i, j)] = coef[c].abs();
            }
        }
        let mask = space.mask_for(|i, j| w[(i, j)] > 0.0);
        push(label, row_normalized(w), mask);
    }

    // The empty pattern must be seeded explicitly: a particle's mask never
    // changes during the run, so no other start can reach it, and without
    // it the selection step never sees the no-network model.
    push(
        "no-network",
        DMatrix::zeros(n, n),
        space.mask_for(|_, _| false),
    );

    ParticleSet {
        particles,
        labels,
        warnings,
    }
}

fn random_particles(
    space: &SwarmSpace,
    beta0: &[f64],
    count: usize,
    rng: &mut crate::rng::Rng,
) -> Vec<SwarmParticle> {
    let dense = space.mask_for(|_, _| true);
    (0..count)
        .map(|_| {
            let mut pos = DVector::zeros(space.dim());
            pos[0] = (0.2 + 0.7 * rng.gen::<f64>()).sqrt();
            for k in 0..space.k {
                pos[1 + k] = beta0[k] + (rng.gen::<f64>() - 0.5) * 2.0;
                pos[1 + space.k + k] = (rng.gen::<f64>() - 0.5) * 1.6;
            }
            for idx in 0..space.entries.len() {
                pos[1 + 2 * space.k + idx] = rng.gen::<f64>();
            }
            SwarmParticle {
                position: pos,
                mask: dense.clone(),
            }
        })
        .collect()
}

/// The labeled candidate starts the estimator would seed its swarm with, in
/// structural form (screened candidates first, then random fills).
pub fn particle_swarm_init(
    panel: &PanelData,
    penalty: &PenaltyConfig,
    cfg: &GmmConfig,
) -> Result<Vec<InitialCandidate>> {
    let data = MomentData::from_panel(panel, cfg)?;
    let transformed = transformed_panel(panel, cfg)?;
    let space = SwarmSpace::new(panel.n(), panel.k());
    let screen = gradient_screen(&data, panel.n());
    let l1 = penalty
        .grid_l1
        .iter()
        .copied()
        .find(|v| *v > 0.0)
        .unwrap_or(0.0);
    let set = build_particles(&space, &data, &transformed, &screen, l1);
    let mut rng = derive_rng(cfg.seed, &[0x712a]);
    let deterministic = set.particles.len();
    let fill = cfg.particle_count.saturating_sub(deterministic);
    let randoms = random_particles(&space, &data.beta_pooled, fill, &mut rng);

    let mut out = Vec::new();
    for (idx, p) in set.particles.iter().chain(randoms.iter()).enumerate() {
        let label = if idx < deterministic {
            set.labels[idx].clone()
        } else {
            format!("random-{}", idx - deterministic)
        };
        let (rho, beta, gamma, w) = space.decode(&p.position, &p.mask, cfg.normalization);
        out.push(InitialCandidate {
            label,
            params: StructuralParams::new(Network::new(w)?, rho, beta, gamma)?,
        });
    }
    Ok(out)
}

fn transformed_panel(panel: &PanelData, cfg: &GmmConfig) -> Result<PanelData> {
    // The moment machinery applies its transforms internally; this copy is
    // for the regression screens, which work on the same transformed data.
    if cfg.demean_time {
        panel.demean_time()
    } else {
        Ok(panel.clone())
    }
}

// ---------------------------------------------------------------------------
// Refinement stages.

struct RefineOutcome {
    rho: f64,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    w: DMatrix<f64>,
    objective: f64,
    iterations: usize,
    monotone: bool,
}

fn refine(
    data: &MomentData,
    param: &SupportParam,
    start: DVector<f64>,
    penalty: &Penalty,
    cfg: &GmmConfig,
) -> RefineOutcome {
    let eval = |v: &DVector<f64>, grad_out: &mut DVector<f64>| -> f64 {
        let (rho, beta, gamma, w) = param.decode(v);
        let (fit, fit_grad) = data.objective_with_grad(rho, &beta, &gamma, &w);
        let mut grad_w = fit_grad.w.clone();
        let pen = penalty.add(param, &w, Some(&mut grad_w));
        param.chain_gradient(
            v,
            fit_grad.rho,
            &fit_grad.beta,
            &fit_grad.gamma,
            &grad_w,
            grad_out,
        );
        fit + pen
    };
    let outcome: LbfgsOutcome = minimize(
        eval,
        start,
        &LbfgsOptions {
            max_iterations: cfg.refine_max_iterations,
            gradient_tol: cfg.refine_gradient_tol,
            memory: 10,
        },
    );
    let monotone = outcome
        .trace
        .windows(2)
        .all(|p| p[1] <= p[0] + 1e-10 * (1.0 + p[0].abs()));
    let (rho, beta, gamma, w) = param.decode(&outcome.x);
    RefineOutcome {
        rho,
        beta,
        gamma,
        w,
        objective: outcome.value,
        iterations: outcome.iterations,
        monotone,
    }
}

/// Scales the freely-estimated entries by `1 + l2/T` to undo ridge
/// shrinkage, then recomputes the substituted entries so constrained rows
/// still sum to one exactly.  A minimizer sitting at the edge of the
/// invertibility region can be pushed over it by the rescale; the
/// correction is skipped in that case rather than returning an unusable
/// point.
fn debias(param: &SupportParam, w: &DMatrix<f64>, rho: f64, l2: f64, t: usize) -> DMatrix<f64> {
    let factor = 1.0 + l2 / t as f64;
    let mut out = DMatrix::zeros(param.n, param.n);
    for &(i, j) in &param.free {
        out[(i, j)] = w[(i, j)] * factor;
    }
    // Unconstrained support entries (rows without a pivot) are free and were
    // scaled above; pivot entries are recomputed from the constraint.
    for (i, pivot) in param.pivots.iter().enumerate() {
        if let Some((pi, pj)) = pivot {
            let others: f64 = param
                .support
                .iter()
                .filter(|(r, c)| *r == i && (*r, *c) != (*pi, *pj))
                .map(|&(r, c)| out[(r, c)])
                .sum();
            out[(*pi, *pj)] = 1.0 - others;
        }
    }
    if crate::reduced::rho_w_row_norm(rho, &out) >= 1.0 - 1e-9 {
        return w.clone();
    }
    out
}

fn support_of(w: &DMatrix<f64>, tol: f64) -> Vec<(usize, usize)> {
    let mut s = Vec::new();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            if i != j && w[(i, j)].abs() > tol {
                s.push((i, j));
            }
        }
    }
    s
}

/// Stage-1 objective value at an arbitrary structural point: moment fit
/// plus the plain elastic-net penalty on the off-diagonal weights, under
/// the given estimation config.
pub fn objective_stage1(
    theta: &StructuralParams,
    panel: &PanelData,
    l1: f64,
    l2: f64,
    cfg: &GmmConfig,
) -> Result<f64> {
    let data = MomentData::from_panel(panel, cfg)?;
    let w = theta.network.weights();
    let fit = data.objective(theta.rho, &theta.beta, &theta.gamma, w);
    let mut pen = 0.0;
    for i in 0..theta.n() {
        for j in 0..theta.n() {
            if i != j {
                pen += l1 * w[(i, j)].abs() + l2 * w[(i, j)] * w[(i, j)];
            }
        }
    }
    Ok(fit + pen)
}

// ---------------------------------------------------------------------------
// Full pipeline.

pub fn estimate(
    panel: &PanelData,
    penalty: &PenaltyConfig,
    cfg: &GmmConfig,
) -> Result<EstimationResult> {
    let n = panel.n();
    let k = panel.k();
    if n < 2 {
        return Err(Error::Invalid("estimation needs at least 2 units".into()));
    }
    if let Normalization::OneRow(r) = cfg.normalization {
        if r >= n {
            return Err(Error::Invalid(format!(
                "normalized row {r} out of range for {n} units"
            )));
        }
    }
    for grid in [&penalty.grid_l1, &penalty.grid_l1_adaptive, &penalty.grid_l2] {
        if grid.is_empty() {
            return Err(Error::Invalid("penalty grids must be non-empty".into()));
        }
        if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(
                "penalty grids must be non-negative and finite".into(),
            ));
        }
    }

    let data = MomentData::from_panel(panel, cfg)?;
    let transformed = transformed_panel(panel, cfg)?;
    let space = SwarmSpace::new(n, k);
    let screen = gradient_screen(&data, n);
    let mut warnings: Vec<String> = Vec::new();

    let swarm_opts = SwarmOptions {
        iterations: cfg.swarm_iterations,
        inertia: cfg.swarm_inertia,
        cognitive: cfg.swarm_cognitive,
        social: cfg.swarm_social,
        patience: cfg.swarm_patience,
    };
    let mut lower = DVector::from_element(space.dim(), 0.0);
    let mut upper = DVector::from_element(space.dim(), 1.0);
    upper[0] = 0.9995; // rho_tilde, so rho < 1
    for kk in 0..k {
        lower[1 + kk] = -5.0;
        upper[1 + kk] = 5.0;
        lower[1 + k + kk] = -5.0;
        upper[1 + k + kk] = 5.0;
    }

    // One swarm per L1 value: the screen threshold and the support search
    // depend on it, while the ridge term only nudges magnitudes and is
    // handled in refinement.
    struct SwarmWinner {
        support: Vec<(usize, usize)>,
        rho: f64,
        beta: Vec<f64>,
        gamma: Vec<f64>,
        w: DMatrix<f64>,
        iterations: usize,
    }
    let mut swarm_winners: Vec<(f64, SwarmWinner)> = Vec::new();
    let mut grid_l1 = penalty.grid_l1.clone();
    grid_l1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid_l1.dedup();

    for &l1 in &grid_l1 {
        let set = build_particles(&space, &data, &transformed, &screen, l1);
        for wmsg in &set.warnings {
            if !warnings.contains(wmsg) {
                warnings.push(wmsg.clone());
            }
        }
        let mut rng = derive_rng(cfg.seed, &[0x5157, l1.to_bits()]);
        let fill = cfg.particle_count.saturating_sub(set.particles.len());
        let mut particles = set.particles;
        particles.extend(random_particles(&space, &data.beta_pooled, fill, &mut rng));

        // The swarm hunts for the support at this L1 level; the ridge term
        // only nudges magnitudes and is left to the refinement stage.
        let outcome = run_swarm(
            &particles,
            &lower,
            &upper,
            |pos, mask| {
                let (rho, beta, gamma, w) = space.decode(pos, mask, cfg.normalization);
                let fit = data.objective(rho, &beta, &gamma, &w);
                let pv: f64 = w.iter().map(|v| v.abs()).sum::<f64>() * l1;
                fit + pv
            },
            &mut rng,
            &swarm_opts,
        );
        let (rho, beta, gamma, w) = space.decode(&outcome.position, &outcome.mask, cfg.normalization);
        let support = support_of(&w, cfg.zero_tol);
        swarm_winners.push((
            l1,
            SwarmWinner {
                support,
                rho,
                beta,
                gamma,
                w,
                iterations: outcome.iterations,
            },
        ));
    }

    // Penalty grid: stage 1 over (l1, l2), stage 2 over l1_adaptive given
    // each stage-1 solution.
    struct Candidate {
        l1: f64,
        l1_adaptive: f64,
        l2: f64,
        stage1: (f64, Vec<f64>, Vec<f64>, DMatrix<f64>),
        stage2: (f64, Vec<f64>, Vec<f64>, DMatrix<f64>),
        log: GridPointLog,
    }
    let mut candidates: Vec<Candidate> = Vec::new();

    for (l1, winner) in &swarm_winners {
        for &l2 in &penalty.grid_l2 {
            let s1_param = SupportParam::new(n, k, &winner.support, cfg.normalization);
            let start = s1_param.encode(winner.rho, &winner.beta, &winner.gamma, &winner.w);
            let s1 = refine(
                &data,
                &s1_param,
                start,
                &Penalty::Plain { l1: *l1, l2 },
                cfg,
            );
            let w1 = debias(&s1_param, &s1.w, s1.rho, l2, data.t);

            // Entries the first stage pushed to (numerical) zero stay zero.
            let support2_full = support_of(&w1, cfg.zero_tol.max(STAGE2_SUPPORT_TOL));
            let exponent = penalty.adaptive_exponent;
            let mut adaptive_weights = DMatrix::zeros(n, n);
            for &(i, j) in &support2_full {
                adaptive_weights[(i, j)] =
                    w1[(i, j)].abs().max(ADAPTIVE_FLOOR).powf(-exponent);
            }

            for &l1a in &penalty.grid_l1_adaptive {
                let s2_param = SupportParam::new(n, k, &support2_full, cfg.normalization);
                let start2 = s2_param.encode(s1.rho, &s1.beta, &s1.gamma, &w1);
                let s2 = refine(
                    &data,
                    &s2_param,
                    start2,
                    &Penalty::Adaptive {
                        l1: l1a,
                        l2,
                        weights: adaptive_weights.clone(),
                    },
                    cfg,
                );
                let w2 = debias(&s2_param, &s2.w, s2.rho, l2, data.t);

                let moment_norm = data.objective(s2.rho, &s2.beta, &s2.gamma, &w2);
                let support_size = support_of(&w2, cfg.zero_tol).len();
                let t = data.t as f64;
                let bic = moment_norm.max(1e-300).ln() + support_size as f64 * t.ln() / t;

                candidates.push(Candidate {
                    l1: *l1,
                    l1_adaptive: l1a,
                    l2,
                    stage1: (s1.rho, s1.beta.clone(), s1.gamma.clone(), w1.clone()),
                    stage2: (s2.rho, s2.beta.clone(), s2.gamma.clone(), w2),
                    log: GridPointLog {
                        l1: *l1,
                        l1_adaptive: l1a,
                        l2,
                        stage1_objective: s1.objective,
                        stage2_objective: s2.objective,
                        stage1_iterations: s1.iterations,
                        stage2_iterations: s2.iterations,
                        stage1_monotone: s1.monotone,
                        stage2_monotone: s2.monotone,
                        swarm_iterations: winner.iterations,
                        support_size,
                        moment_norm,
                        bic,
                        selected: false,
                    },
                });
            }
        }
    }

    // BIC selection; ties go to the lexicographically smallest penalties.
    let mut best: Option<usize> = None;
    for (idx, c) in candidates.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cb = &candidates[b];
                let key_c = (c.log.bic, c.l1, c.l1_adaptive, c.l2);
                let key_b = (cb.log.bic, cb.l1, cb.l1_adaptive, cb.l2);
                match key_c.partial_cmp(&key_b) {
                    Some(std::cmp::Ordering::Less) => true,
                    _ => false,
                }
            }
        };
        if better {
            best = Some(idx);
        }
    }
    let best = best.ok_or_else(|| Error::NonConvergence("empty penalty grid".into()))?;

    let mut convergence_log: Vec<GridPointLog> = Vec::with_capacity(candidates.len());
    for (idx, c) in candidates.iter().enumerate() {
        let mut log = c.log.clone();
        log.selected = idx == best;
        convergence_log.push(log);
    }

    let chosen = &candidates[best];
    let (mut rho2, beta2, gamma2, w2) = chosen.stage2.clone();
    let support_final = support_of(&w2, cfg.zero_tol);
    if support_final.is_empty() {
        // Without edges the feedback strength never enters the objective.
        rho2 = 0.0;
    }
    let theta_hat = StructuralParams::new(
        Network::new(w2.clone())?,
        rho2,
        beta2.clone(),
        gamma2.clone(),
    )?;
    let (rho1, beta1, gamma1, w1) = chosen.stage1.clone();
    let stage1_theta = StructuralParams::new(
        Network::new(w1)?,
        if support_final.is_empty() { 0.0 } else { rho1 },
        beta1,
        gamma1,
    )?;

    let mut zero_pattern = vec![vec![true; n]; n];
    for &(i, j) in &support_final {
        zero_pattern[i][j] = false;
    }

    let post_estimate = if support_final.is_empty() {
        warnings.push("estimated network is empty; no instrument-based refit".to_string());
        None
    } else {
        match post_2sls(
            panel,
            &theta_hat.network,
            cfg.demean_time,
            cfg.shock_projection,
        ) {
            Ok(fit) => Some(fit),
            Err(e) => {
                warnings.push(format!("instrument-based refit failed: {e}"));
                None
            }
        }
    };

    Ok(EstimationResult {
        theta_hat,
        stage1_theta,
        chosen_penalty: (chosen.l1, chosen.l1_adaptive, chosen.l2),
        bic_value: chosen.log.bic,
        moment_norm: chosen.log.moment_norm,
        zero_pattern,
        post_estimate,
        convergence_log,
        warnings,
    })
}
