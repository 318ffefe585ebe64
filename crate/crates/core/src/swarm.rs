//! Masked particle swarm for global exploration of the estimation surface.
//!
//! Each particle carries a support mask: coordinates outside its mask are
//! pinned at zero, so a particle explores one sparsity pattern while the
//! swarm as a whole competes across patterns.  The best position found
//! (with its mask) seeds the local refinement stage.

use nalgebra::DVector;
use rand::Rng as _;

use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct SwarmParticle {
    pub position: DVector<f64>,
    /// Coordinates this particle is allowed to move; the rest stay zero.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SwarmOptions {
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Iterations without meaningful improvement before stopping early.
    pub patience: usize,
}

#[derive(Debug, Clone)]
pub struct SwarmOutcome {
    pub position: DVector<f64>,
    pub mask: Vec<bool>,
    pub value: f64,
    pub iterations: usize,
}

/// Runs the swarm and returns the best masked position found.
///
/// Determinism: particles are updated in order with a single random stream,
/// so the outcome depends only on the inputs and the stream state.
pub fn run_swarm<F>(
    particles: &[SwarmParticle],
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    mut eval: F,
    rng: &mut Rng,
    opts: &SwarmOptions,
) -> SwarmOutcome
where
    F: FnMut(&DVector<f64>, &[bool]) -> f64,
{
    assert!(!particles.is_empty());
    let dim = lower.len();
    assert_eq!(upper.len(), dim);

    let clamp = |x: &mut DVector<f64>, mask: &[bool]| {
        for d in 0..dim {
            if mask[d] {
                x[d] = x[d].clamp(lower[d], upper[d]);
            } else {
                x[d] = 0.0;
            }
        }
    };

    let mut positions: Vec<DVector<f64>> = Vec::with_capacity(particles.len());
    let mut velocities: Vec<DVector<f64>> = Vec::with_capacity(particles.len());
    let mut best_positions: Vec<DVector<f64>> = Vec::with_capacity(particles.len());
    let mut best_values: Vec<f64> = Vec::with_capacity(particles.len());
    let mut global_value = f64::INFINITY;
    let mut global_index = 0usize;

    for (idx, p) in particles.iter().enumerate() {
        assert_eq!(p.position.len(), dim);
        assert_eq!(p.mask.len(), dim);
        let mut pos = p.position.clone();
        clamp(&mut pos, &p.mask);
        let value = eval(&pos, &p.mask);
        if value < global_value {
            global_value = value;
            global_index = idx;
        }
        best_values.push(value);
        best_positions.push(pos.clone());
        positions.push(pos);
        velocities.push(DVector::zeros(dim));
    }
    let mut global_position = best_positions[global_index].clone();
    let mut global_mask = particles[global_index].mask.clone();

    let vmax: DVector<f64> = (upper - lower) * 0.25;
    let mut since_improvement = 0usize;
    let mut iterations = 0usize;

    for _ in 0..opts.iterations {
        iterations += 1;
        let mut improved = false;
        for (idx, particle) in particles.iter().enumerate() {
            for d in 0..dim {
                if !particle.mask[d] {
                    continue;
                }
                let r1: f64 = rng.gen();
                let r2: f64 = rng.gen();
                let v = opts.inertia * velocities[idx][d]
                    + opts.cognitive * r1 * (best_positions[idx][d] - positions[idx][d])
                    + opts.social * r2 * (global_position[d] - positions[idx][d]);
                velocities[idx][d] = v.clamp(-vmax[d], vmax[d]);
                positions[idx][d] += velocities[idx][d];
            }
            clamp(&mut positions[idx], &particle.mask);
            let value = eval(&positions[idx], &particle.mask);
            if value < best_values[idx] {
                best_values[idx] = value;
                best_positions[idx].copy_from(&positions[idx]);
            }
            if value < global_value - 1e-12 * (1.0 + global_value.abs()) {
                global_value = value;
                global_position.copy_from(&positions[idx]);
                global_mask = particle.mask.clone();
                improved = true;
            }
        }
        if improved {
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= opts.patience {
                break;
            }
        }
    }

    SwarmOutcome {
        position: global_position,
        mask: global_mask,
        value: global_value,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn sphere_particles(dim: usize, count: usize, rng: &mut Rng) -> Vec<SwarmParticle> {
        (0..count)
            .map(|_| SwarmParticle {
                position: DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 4.0 - 2.0),
                mask: vec![true; dim],
            })
            .collect()
    }

    #[test]
    fn finds_a_shifted_sphere_minimum() {
        let dim = 5;
        let mut rng = derive_rng(1, &[0]);
        let particles = sphere_particles(dim, 30, &mut rng);
        let lower = DVector::from_element(dim, -3.0);
        let upper = DVector::from_element(dim, 3.0);
        let target = DVector::from_fn(dim, |i, _| 0.3 * i as f64 - 0.6);
        let out = run_swarm(
            &particles,
            &lower,
            &upper,
            |x, _| (x - &target).norm_squared(),
            &mut rng,
            &SwarmOptions {
                iterations: 200,
                inertia: 0.7,
                cognitive: 1.5,
                social: 1.5,
                patience: 200,
            },
        );
        assert!(out.value < 1e-3, "best value {}", out.value);
    }

    #[test]
    fn masked_coordinates_stay_zero() {
        let dim = 4;
        let mut rng = derive_rng(2, &[0]);
        let mask = vec![true, false, true, false];
        let mut particles = vec![
            SwarmParticle {
                position: DVector::from_column_slice(&[1.0, 1.0, 1.0, 1.0]),
                mask: mask.clone(),
            },
            SwarmParticle {
                position: DVector::from_column_slice(&[-1.0, 2.0, 0.5, -2.0]),
                mask: mask.clone(),
            },
        ];
        for p in sphere_particles(dim, 10, &mut rng) {
            particles.push(SwarmParticle {
                position: p.position,
                mask: mask.clone(),
            });
        }
        let lower = DVector::from_element(dim, -2.0);
        let upper = DVector::from_element(dim, 2.0);
        let out = run_swarm(
            &particles,
            &lower,
            &upper,
            |x, m| {
                assert_eq!(x[1], 0.0);
                assert_eq!(x[3], 0.0);
                assert_eq!(m, mask.as_slice());
                (x[0] - 1.5).powi(2) + (x[2] + 0.5).powi(2) + x[1] + x[3]
            },
            &mut rng,
            &SwarmOptions {
                iterations: 200,
                inertia: 0.7,
                cognitive: 1.5,
                social: 1.5,
                patience: 200,
            },
        );
        assert_eq!(out.position[1], 0.0);
        assert_eq!(out.position[3], 0.0);
        assert!(out.value < 1e-3, "best value {}", out.value);
    }

    #[test]
    fn swarm_is_deterministic_for_a_fixed_stream() {
        let dim = 3;
        let run = || {
            let mut rng = derive_rng(7, &[1]);
            let particles = sphere_particles(dim, 10, &mut rng);
            let lower = DVector::from_element(dim, -2.0);
            let upper = DVector::from_element(dim, 2.0);
            run_swarm(
                &particles,
                &lower,
                &upper,
                |x, _| x.norm_squared(),
                &mut rng,
                &SwarmOptions {
                    iterations: 50,
                    inertia: 0.7,
                    cognitive: 1.5,
                    social: 1.5,
                    patience: 50,
                },
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.position, b.position);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn patience_cuts_the_run_short() {
        let mut rng = derive_rng(9, &[0]);
        let particles = vec![SwarmParticle {
            position: DVector::from_column_slice(&[0.0]),
            mask: vec![true],
        }];
        let lower = DVector::from_element(1, -1.0);
        let upper = DVector::from_element(1, 1.0);
        let out = run_swarm(
            &particles,
            &lower,
            &upper,
            |_, _| 1.0, // flat: nothing ever improves
            &mut rng,
            &SwarmOptions {
                iterations: 500,
                inertia: 0.7,
                cognitive: 1.5,
                social: 1.5,
                patience: 5,
            },
        );
        assert!(out.iterations <= 6);
    }
}
