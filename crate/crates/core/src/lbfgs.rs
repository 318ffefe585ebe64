//! Limited-memory quasi-Newton minimizer with backtracking line search.
//!
//! The estimation objective is smooth in the substituted parameterization,
//! so a small-memory BFGS approximation with an Armijo line search is
//! enough; the accepted-value trace is kept so callers can verify descent
//! was monotone.

use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    /// Stop when the sup-norm of the gradient falls below
    /// `gradient_tol * (1 + |f|)`.
    pub gradient_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            gradient_tol: 1e-8,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start plus after every accepted step.
    pub trace: Vec<f64>,
}

/// Minimizes `eval`, which must return the objective and fill the gradient.
pub fn minimize<F>(mut eval: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let dim = x0.len();
    let mut x = x0;
    let mut grad = DVector::zeros(dim);
    let mut f = eval(&x, &mut grad);
    let mut trace = vec![f];
    let mut history: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new(); // (s, y, 1/s'y)
    let mut converged = grad.amax() <= opts.gradient_tol * (1.0 + f.abs());
    let mut iterations = 0;
    let mut stalled = 0usize;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;

        // Two-loop recursion for the search direction.
        let mut d = -grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, inv_sy) in history.iter().rev() {
            let a = inv_sy * s.dot(&d);
            d -= y * a;
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.last() {
            d *= s.dot(y) / y.dot(y);
        }
        for ((s, y, inv_sy), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = inv_sy * y.dot(&d);
            d += s * (a - b);
        }

        let mut slope = d.dot(&grad);
        if !slope.is_finite() || slope >= -1e-14 * d.norm() * grad.norm() {
            // Curvature information went bad; restart from steepest descent.
            history.clear();
            d = -grad.clone();
            slope = d.dot(&grad);
            if slope >= 0.0 {
                break; // gradient is zero or non-finite
            }
        }

        let mut step = if history.is_empty() {
            (1.0 / grad.amax().max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let mut new_grad = DVector::zeros(dim);
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &x + &d * step;
            let fc = eval(&candidate, &mut new_grad);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                accepted = Some((candidate, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            break; // no acceptable step along this direction
        };

        let s = &x_new - &x;
        let y = &new_grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == opts.memory {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }

        if (f - f_new).abs() <= 1e-15 * (1.0 + f.abs()) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = x_new;
        f = f_new;
        grad = new_grad.clone();
        trace.push(f);
        converged = grad.amax() <= opts.gradient_tol * (1.0 + f.abs());
        if stalled >= 3 {
            break;
        }
    }

    LbfgsOutcome {
        x,
        value: f,
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges_to_center() {
        let out = minimize(
            |x, g| {
                g[0] = 2.0 * (x[0] - 3.0);
                g[1] = 8.0 * (x[1] + 1.0);
                (x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2)
            },
            DVector::from_column_slice(&[0.0, 0.0]),
            &LbfgsOptions::default(),
        );
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-6);
        assert!((out.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_valley_is_tracked_to_the_minimum() {
        let out = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            DVector::from_column_slice(&[-1.2, 1.0]),
            &LbfgsOptions {
                max_iterations: 500,
                ..LbfgsOptions::default()
            },
        );
        assert!(out.converged, "stopped after {} iterations", out.iterations);
        assert!((out.x[0] - 1.0).abs() < 1e-5);
        assert!((out.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn accepted_values_never_increase() {
        let out = minimize(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            DVector::from_column_slice(&[-1.2, 1.0]),
            &LbfgsOptions::default(),
        );
        for pair in out.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn flat_function_stops_immediately() {
        let out = minimize(
            |_, g| {
                g.fill(0.0);
                5.0
            },
            DVector::from_column_slice(&[1.0, 2.0, 3.0]),
            &LbfgsOptions::default(),
        );
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.value, 5.0);
    }
}
