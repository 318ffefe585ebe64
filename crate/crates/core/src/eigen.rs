use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduced::ReducedForm;

/// Eigenstructure of a reduced-form coefficient matrix.
///
/// Eigenvectors are stored as columns and are the *influence-side* (left)
/// eigenvectors of the input matrix: `v' Pi = lambda v'`.  The interaction
/// matrix and the reduced form share these, so centrality read off `Pi` equals
/// centrality read off `W`.  Complex numbers are stored as `(re, im)` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenAnalysis {
    pub eigenvalues_pi: Vec<(f64, f64)>,
    /// Implied interaction-matrix eigenvalues, populated when the scalar
    /// parameters are supplied (empty otherwise).
    pub eigenvalues_w: Vec<(f64, f64)>,
    pub eigenvectors: Vec<Vec<(f64, f64)>>,
    pub dominant_index: Option<usize>,
    /// Normalized dominant eigenvector (sums to one); `None` when no real
    /// dominant eigenvalue exists or its eigenspace is degenerate.
    pub eigencentrality: Option<Vec<f64>>,
    /// True when the dominant eigenvector has a strictly positive pattern and
    /// a simple eigenvalue, i.e. centrality is meaningful.
    pub informative: bool,
    /// True when the eigenvector basis is well-conditioned; a defective or
    /// nearly-defective matrix flips this off.
    pub eigenvectors_reliable: bool,
    /// Condition proxy for the eigenvector basis (min/max of the QR diagonal).
    pub basis_condition: f64,
    pub max_residual: f64,
    pub note: String,
}

impl EigenAnalysis {
    pub fn eigenvalue(&self, k: usize) -> Complex<f64> {
        Complex::new(self.eigenvalues_pi[k].0, self.eigenvalues_pi[k].1)
    }

    pub fn eigenvector(&self, k: usize) -> Vec<Complex<f64>> {
        self.eigenvectors[k].iter().map(|&(re, im)| Complex::new(re, im)).collect()
    }
}

/// Analyzes the first reduced-form coefficient matrix.
pub fn eigen_analysis(pi: &ReducedForm) -> Result<EigenAnalysis> {
    eigen_analysis_matrix(&pi.pi[0])
}

/// Analyzes `Pi_1` and additionally reports the interaction-matrix
/// eigenvalues implied by the scalar parameters through the spectral map
/// `lambda_Pi = (beta + gamma lambda_W) / (1 - rho lambda_W)`.
pub fn eigen_analysis_with_params(
    pi: &ReducedForm,
    rho: f64,
    beta: f64,
    gamma: f64,
) -> Result<EigenAnalysis> {
    let mut analysis = eigen_analysis_matrix(&pi.pi[0])?;
    analysis.eigenvalues_w = analysis
        .eigenvalues_pi
        .iter()
        .map(|&(re, im)| {
            let lp = Complex::new(re, im);
            let denom = Complex::new(gamma, 0.0) + lp * rho;
            if denom.norm() <= 1e-300 {
                (f64::NAN, f64::NAN)
            } else {
                let lw = (lp - Complex::new(beta, 0.0)) / denom;
                (lw.re, lw.im)
            }
        })
        .collect();
    Ok(analysis)
}

/// Full eigenstructure of an arbitrary square real matrix (influence-side
/// eigenvectors).  Apply directly to an interaction matrix to rank units by
/// eigencentrality.
pub fn eigen_analysis_matrix(m: &DMatrix<f64>) -> Result<EigenAnalysis> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension(format!("matrix must be square, got {}x{}", n, m.ncols())));
    }
    if n == 0 {
        return Err(Error::Invalid("empty matrix".into()));
    }
    let at = m.transpose();
    let mut eigenvalues = bounded_eigenvalues(m)?;
    eigenvalues.sort_by(|a, b| {
        b.re.partial_cmp(&a.re).unwrap().then(b.im.partial_cmp(&a.im).unwrap())
    });

    let scale = m.abs().max().max(1e-300);
    let mut vectors: Vec<DVector<Complex<f64>>> = Vec::with_capacity(n);
    let mut max_residual: f64 = 0.0;
    for &lambda in &eigenvalues {
        let v = inverse_iteration(&at, lambda, scale);
        let residual = (&at.map(|x| Complex::new(x, 0.0)) * &v - &v * lambda).norm();
        max_residual = max_residual.max(residual);
        vectors.push(v);
    }

    // Condition proxy for the eigenvector basis from a complex QR: the ratio
    // of smallest to largest |R_ii| collapses when vectors are dependent.
    let vmat = DMatrix::from_fn(n, n, |i, j| vectors[j][i]);
    let qr = vmat.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].norm()).collect();
    let dmax = diag.iter().copied().fold(0.0f64, f64::max);
    let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let basis_condition = if dmax > 0.0 { dmin / dmax } else { 0.0 };
    let eigenvectors_reliable = basis_condition > 1e-8 && max_residual <= 1e-6 * scale.max(1.0);

    let real_tol = 1e-8 * scale.max(1.0);
    let mut dominant_index = None;
    let mut positive_found = false;
    let mut candidates: Vec<usize> = (0..n).filter(|&k| eigenvalues[k].im.abs() <= real_tol).collect();
    candidates.sort_by(|&a, &b| {
        eigenvalues[b]
            .norm()
            .partial_cmp(&eigenvalues[a].norm())
            .unwrap()
            .then(a.cmp(&b))
    });
    for &k in &candidates {
        if positive_pattern(&vectors[k]) {
            dominant_index = Some(k);
            positive_found = true;
            break;
        }
    }
    if dominant_index.is_none() {
        dominant_index = candidates.first().copied();
    }

    let mut note = String::new();
    let mut informative = positive_found;
    let mut eigencentrality = None;
    if let Some(k) = dominant_index {
        let lam = eigenvalues[k];
        let multiplicity =
            eigenvalues.iter().filter(|l| (*l - lam).norm() <= real_tol.max(1e-10)).count();
        if multiplicity > 1 {
            informative = false;
            note = format!("dominant eigenvalue has multiplicity {multiplicity}; centrality is not informative");
        } else {
            let real: Vec<f64> = vectors[k].iter().map(|c| c.re).collect();
            let total: f64 = real.iter().sum();
            if total.abs() > 1e-12 {
                eigencentrality = Some(real.iter().map(|v| v / total).collect());
            } else {
                informative = false;
                note = "dominant eigenvector sums to zero; centrality undefined".into();
            }
        }
    } else {
        note = "no real eigenvalue; centrality undefined".into();
    }
    if !positive_found && note.is_empty() {
        note = "no strictly positive eigenvector pattern".into();
    }

    Ok(EigenAnalysis {
        eigenvalues_pi: eigenvalues.iter().map(|c| (c.re, c.im)).collect(),
        eigenvalues_w: Vec::new(),
        eigenvectors: (0..n)
            .map(|kk| vectors[kk].iter().map(|c| (c.re, c.im)).collect())
            .collect(),
        dominant_index,
        eigencentrality,
        informative,
        eigenvectors_reliable,
        basis_condition,
        max_residual,
        note,
    })
}

/// Eigenvalues through a Schur decomposition with an iteration cap.  The
/// unbounded QR iteration can cycle forever on permutation-like matrices
/// (periodic networks produce exactly those); on failure a tiny
/// deterministic perturbation breaks the symmetry and the attempt repeats.
/// The induced eigenvalue motion stays orders of magnitude below every
/// reporting tolerance in this module.
fn bounded_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let scale = m.abs().max().max(1.0);
    let mut work = m.clone();
    for attempt in 0..4i32 {
        if let Some(schur) = Schur::try_new(work.clone(), 1e-13, 100_000) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
        let eps = scale * 1e-12 * 10f64.powi(attempt);
        for i in 0..work.nrows() {
            for j in 0..work.ncols() {
                let jitter = ((i * 31 + j * 17 + attempt as usize) % 7) as f64 - 3.0;
                work[(i, j)] += eps * jitter;
            }
        }
    }
    Err(Error::NonConvergence(
        "eigenvalue iteration did not converge even after symmetry-breaking \
         perturbations"
            .into(),
    ))
}

/// Shifted inverse iteration for the eigenvector of `a` at `lambda`.
fn inverse_iteration(
    a: &DMatrix<f64>,
    lambda: Complex<f64>,
    scale: f64,
) -> DVector<Complex<f64>> {
    let n = a.nrows();
    let ac = a.map(|x| Complex::new(x, 0.0));
    let mut delta = 1e-10 * (scale + lambda.norm()).max(1.0);
    let start = DVector::from_fn(n, |i, _| {
        Complex::new(1.0 + 0.01 * ((i as f64) + 1.0).sin(), 0.01 * ((i as f64) + 1.0).cos())
    });
    for _attempt in 0..4 {
        let shift = lambda + Complex::new(delta, delta);
        let mut b = ac.clone();
        for i in 0..n {
            b[(i, i)] -= shift;
        }
        let lu = b.lu();
        let mut v = start.clone();
        let mut ok = true;
        for _ in 0..4 {
            match lu.solve(&v) {
                Some(next) => {
                    let norm = next.norm();
                    if !norm.is_finite() || norm == 0.0 {
                        ok = false;
                        break;
                    }
                    v = next / Complex::new(norm, 0.0);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            // Canonical phase: largest-magnitude entry made real positive.
            let (mut best, mut best_norm) = (0usize, 0.0f64);
            for i in 0..n {
                if v[i].norm() > best_norm {
                    best_norm = v[i].norm();
                    best = i;
                }
            }
            if best_norm > 0.0 {
                let phase = v[best] / Complex::new(best_norm, 0.0);
                v /= phase;
            }
            return v;
        }
        delta *= 100.0;
    }
    DVector::from_element(n, Complex::new(f64::NAN, 0.0))
}

/// Strictly positive real pattern (up to a tiny imaginary residue).
fn positive_pattern(v: &DVector<Complex<f64>>) -> bool {
    let max_norm = v.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    if max_norm == 0.0 || !max_norm.is_finite() {
        return false;
    }
    let tol = 1e-8 * max_norm;
    v.iter().all(|c| c.im.abs() <= tol && c.re > tol)
}

/// Route-by-route sign identification for the total interaction effect
/// `rho beta + gamma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignReport {
    /// Sign read off the off-diagonal entries of `Pi` (valid for positive
    /// `rho` and a nonnegative network): +1, -1, or `None` when entries mix.
    pub sign_offdiagonal: Option<i8>,
    pub offdiag_positive: usize,
    pub offdiag_negative: usize,
    /// Sign read off the position of the positive-eigenvector eigenvalue
    /// among the real eigenvalues of `Pi`.
    pub sign_eigen: Option<i8>,
    pub eigen_note: String,
    /// Set when both routes produced a sign.
    pub routes_agree: Option<bool>,
}

/// Determines the sign of the total effect from the reduced form alone.
/// Errors when the off-diagonal is entirely zero (empty network: no
/// interaction effect to sign).
pub fn sign_of_network_effect(pi: &ReducedForm, zero_tol: f64) -> Result<SignReport> {
    let m = &pi.pi[0];
    let n = m.nrows();
    let mut pos = 0usize;
    let mut neg = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if m[(i, j)] > zero_tol {
                    pos += 1;
                } else if m[(i, j)] < -zero_tol {
                    neg += 1;
                }
            }
        }
    }
    if pos + neg == 0 {
        return Err(Error::Invalid(
            "all off-diagonal reduced-form entries are zero; the network is empty and the effect sign is undefined".into(),
        ));
    }
    let sign_offdiagonal = match (pos > 0, neg > 0) {
        (true, false) => Some(1),
        (false, true) => Some(-1),
        _ => None,
    };

    let analysis = eigen_analysis_matrix(m)?;
    let real_tol = 1e-8 * m.abs().max().max(1.0);
    let reals: Vec<f64> = analysis
        .eigenvalues_pi
        .iter()
        .filter(|(_, im)| im.abs() <= real_tol)
        .map(|&(re, _)| re)
        .collect();
    let (sign_eigen, eigen_note) = match analysis.dominant_index {
        Some(k) if analysis.informative && reals.len() >= 2 => {
            let lam = analysis.eigenvalues_pi[k].0;
            let max_real = reals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min_real = reals.iter().copied().fold(f64::INFINITY, f64::min);
            if (lam - max_real).abs() <= real_tol && (lam - min_real).abs() > real_tol {
                (Some(1i8), "positive eigenvector pairs with the largest real eigenvalue".to_string())
            } else if (lam - min_real).abs() <= real_tol && (lam - max_real).abs() > real_tol {
                (Some(-1i8), "positive eigenvector pairs with the smallest real eigenvalue".to_string())
            } else {
                (None, "positive-eigenvector eigenvalue is neither extreme real eigenvalue".to_string())
            }
        }
        _ => (
            None,
            "no unique positive eigenvector (matrix may be reducible) or fewer than two real eigenvalues"
                .to_string(),
        ),
    };
    let routes_agree = match (sign_offdiagonal, sign_eigen) {
        (Some(a), Some(b)) => Some(a == b),
        _ => None,
    };
    Ok(SignReport {
        sign_offdiagonal,
        offdiag_positive: pos,
        offdiag_negative: neg,
        sign_eigen,
        eigen_note,
        routes_agree,
    })
}
