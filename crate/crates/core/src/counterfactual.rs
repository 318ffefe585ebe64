//! Shock propagation under competing network hypotheses.
//!
//! A one-off shock `s` applied on top of an equilibrium moves outcomes by
//! `(I - rho W)^-1 s`.  Comparing the post-shock outcome vectors under two
//! candidate networks measures how much the choice of network matters for a
//! given intervention.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::reduced::solve_s;

/// A propagation experiment: the same shock is pushed through two candidate
/// networks and the post-shock outcomes are compared unit by unit.
#[derive(Debug, Clone)]
pub struct ShockScenario {
    pub network_a: Network,
    pub network_b: Network,
    pub rho: f64,
    /// Index of the unit the shock originates from.
    pub origin_unit: usize,
    /// Shock expressed as a fraction of the origin's baseline outcome.
    pub shock_size: f64,
    pub baseline_outcomes: Vec<f64>,
}

/// Unit-level comparison of post-shock outcomes under the two hypotheses.
///
/// `log_ratio[j]` is `ln(post_a[j]) - ln(post_b[j])`, defined only when both
/// post-shock outcomes are strictly positive; undefined entries carry a
/// reason instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkComparison {
    pub origin_unit: usize,
    pub shock: f64,
    pub response_a: Vec<f64>,
    pub response_b: Vec<f64>,
    pub post_a: Vec<f64>,
    pub post_b: Vec<f64>,
    pub log_ratio: Vec<Option<f64>>,
    pub undefined_units: Vec<UndefinedRatio>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UndefinedRatio {
    pub unit: usize,
    pub reason: String,
}

/// Equilibrium response `(I - rho W)^-1 s` to an additive shock `s`.
pub fn propagate(network: &Network, rho: f64, shock: &DVector<f64>) -> Result<DVector<f64>> {
    if shock.len() != network.n() {
        return Err(Error::Dimension(format!(
            "shock length {} does not match network size {}",
            shock.len(),
            network.n()
        )));
    }
    if shock.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("shock vector has non-finite entries".into()));
    }
    let solved = solve_s(rho, network.weights())?;
    Ok(&solved.inv * shock)
}

/// Runs the scenario under both hypotheses and reports post-shock outcomes
/// and their per-unit log ratios.
pub fn compare_networks(scenario: &ShockScenario) -> Result<NetworkComparison> {
    let n = scenario.network_a.n();
    if scenario.network_b.n() != n {
        return Err(Error::Dimension(format!(
            "network sizes differ: {} vs {}",
            n,
            scenario.network_b.n()
        )));
    }
    if scenario.baseline_outcomes.len() != n {
        return Err(Error::Dimension(format!(
            "baseline has {} entries for {} units",
            scenario.baseline_outcomes.len(),
            n
        )));
    }
    if scenario.origin_unit >= n {
        return Err(Error::Invalid(format!(
            "origin unit {} out of range for {} units",
            scenario.origin_unit, n
        )));
    }
    if !scenario.shock_size.is_finite() || !scenario.baseline_outcomes.iter().all(|v| v.is_finite())
    {
        return Err(Error::Invalid(
            "shock size and baseline outcomes must be finite".into(),
        ));
    }

    let shock_value = scenario.shock_size * scenario.baseline_outcomes[scenario.origin_unit];
    let mut shock = DVector::zeros(n);
    shock[scenario.origin_unit] = shock_value;

    let response_a = propagate(&scenario.network_a, scenario.rho, &shock)?;
    let response_b = propagate(&scenario.network_b, scenario.rho, &shock)?;

    let baseline = DVector::from_column_slice(&scenario.baseline_outcomes);
    let post_a = &baseline + &response_a;
    let post_b = &baseline + &response_b;

    let mut log_ratio = Vec::with_capacity(n);
    let mut undefined_units = Vec::new();
    for j in 0..n {
        if post_a[j] > 0.0 && post_b[j] > 0.0 {
            log_ratio.push(Some(post_a[j].ln() - post_b[j].ln()));
        } else {
            let reason = match (post_a[j] > 0.0, post_b[j] > 0.0) {
                (false, false) => "post-shock outcome non-positive under both networks",
                (false, true) => "post-shock outcome non-positive under network A",
                (true, false) => "post-shock outcome non-positive under network B",
                _ => unreachable!(),
            };
            log_ratio.push(None);
            undefined_units.push(UndefinedRatio {
                unit: j,
                reason: reason.to_string(),
            });
        }
    }

    Ok(NetworkComparison {
        origin_unit: scenario.origin_unit,
        shock: shock_value,
        response_a: response_a.iter().copied().collect(),
        response_b: response_b.iter().copied().collect(),
        post_a: post_a.iter().copied().collect(),
        post_b: post_b.iter().copied().collect(),
        log_ratio,
        undefined_units,
    })
}
