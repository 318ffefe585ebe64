//! Network summary statistics and estimate-versus-truth recovery metrics.
//!
//! Edge direction convention: entry `(i, j)` means `j` influences `i`, so a
//! node's out-degree counts the column entries (how many units it reaches)
//! and in-degree counts the row entries (how many units it listens to).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::{diag_w2_sd, StructuralParams};
use crate::reduced::reduced_form;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkStats {
    pub n: usize,
    pub edge_count: usize,
    pub density: f64,
    /// Edges with magnitude strictly above `strong_threshold`.
    pub strong_edges: usize,
    pub weak_edges: usize,
    pub strong_threshold: f64,
    /// Directed edges whose reverse edge is also present.
    pub reciprocated_edges: usize,
    /// Transitivity of the undirected support: 3 * triangles / connected
    /// triples; zero when there are no triples.
    pub global_clustering: f64,
    /// Weakly connected components of the support.
    pub components: usize,
    pub largest_component: usize,
    pub isolated_nodes: usize,
    /// Spread of `diag(W^2)`; zero here means reciprocal feedback is too
    /// uniform for the network scale to be separately identified.
    pub squared_diagonal_sd: f64,
    pub in_degree_mean: f64,
    pub in_degree_sd: f64,
    pub out_degree_mean: f64,
    pub out_degree_sd: f64,
    /// Up to three node indices with the highest out-degree, ties broken by
    /// smaller index.
    pub top_out_degree: Vec<usize>,
}

fn mean_sd(values: &[usize]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<usize>() as f64 / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }
    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.parent[ri] = rj;
        }
    }
}

pub fn network_stats(net: &Network, strong_threshold: f64, zero_tol: f64) -> NetworkStats {
    let n = net.n();
    let w = net.weights();

    let mut edge_count = 0;
    let mut strong_edges = 0;
    let mut reciprocated_edges = 0;
    let mut in_degree = vec![0usize; n];
    let mut out_degree = vec![0usize; n];
    let mut undirected = DMatrix::<f64>::zeros(n, n);
    let mut sets = DisjointSet::new(n);

    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if w[(i, j)].abs() > zero_tol {
                edge_count += 1;
                in_degree[i] += 1;
                out_degree[j] += 1;
                if w[(i, j)].abs() > strong_threshold {
                    strong_edges += 1;
                }
                if w[(j, i)].abs() > zero_tol {
                    reciprocated_edges += 1;
                }
                undirected[(i, j)] = 1.0;
                undirected[(j, i)] = 1.0;
                sets.union(i, j);
            }
        }
    }

    let degrees: Vec<usize> = (0..n)
        .map(|i| undirected.row(i).iter().filter(|&&v| v > 0.5).count())
        .collect();
    let triples: usize = degrees.iter().map(|&d| d * d.saturating_sub(1) / 2).sum();
    let global_clustering = if triples > 0 {
        let cubed = &undirected * &undirected * &undirected;
        let triangles = cubed.trace() / 6.0;
        3.0 * triangles / triples as f64
    } else {
        0.0
    };

    let mut component_sizes = std::collections::HashMap::new();
    for i in 0..n {
        *component_sizes.entry(sets.find(i)).or_insert(0usize) += 1;
    }
    let components = component_sizes.len();
    let largest_component = component_sizes.values().copied().max().unwrap_or(0);
    let isolated_nodes = degrees.iter().filter(|&&d| d == 0).count();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(out_degree[j]), j));
    let top_out_degree = order.into_iter().take(3).collect();

    let (in_degree_mean, in_degree_sd) = mean_sd(&in_degree);
    let (out_degree_mean, out_degree_sd) = mean_sd(&out_degree);

    NetworkStats {
        n,
        edge_count,
        density: if n > 1 {
            edge_count as f64 / (n * (n - 1)) as f64
        } else {
            0.0
        },
        strong_edges,
        weak_edges: edge_count - strong_edges,
        strong_threshold,
        reciprocated_edges,
        global_clustering,
        components,
        largest_component,
        isolated_nodes,
        squared_diagonal_sd: diag_w2_sd(w),
        in_degree_mean,
        in_degree_sd,
        out_degree_mean,
        out_degree_sd,
        top_out_degree,
    }
}

/// Units reachable from `source` along influence edges (paths of length at
/// least one).  `reachable[i]` is true when some walk `source -> ... -> i`
/// exists, which is exactly when outcome `i` responds to shocks at `source`.
pub fn reachable_from(net: &Network, source: usize, zero_tol: f64) -> Vec<bool> {
    let n = net.n();
    let w = net.weights();
    let mut reached = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    // Successors of j are the rows with weight on column j.
    for i in 0..n {
        if w[(i, source)].abs() > zero_tol && !reached[i] {
            reached[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(v) = queue.pop_front() {
        for i in 0..n {
            if w[(i, v)].abs() > zero_tol && !reached[i] {
                reached[i] = true;
                queue.push_back(i);
            }
        }
    }
    reached
}

/// Estimate-versus-truth comparison on a shared node set.
///
/// Support rates follow the convention that an empty class counts as fully
/// recovered: if the truth has no zero entries, `zero_recovery_rate` is 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    /// Mean absolute deviation of off-diagonal weights.
    pub mad_w: f64,
    /// Mean absolute deviation of reduced-form entries (all covariates);
    /// `None` when either reduced form cannot be computed.
    pub mad_pi: Option<f64>,
    /// Fraction of truly-zero off-diagonal entries estimated as zero.
    pub zero_recovery_rate: f64,
    /// Fraction of truly-nonzero off-diagonal entries estimated as nonzero.
    pub nonzero_recovery_rate: f64,
    /// Fraction of strong true edges (magnitude above the threshold)
    /// estimated as nonzero; `None` when the truth has none.
    pub strong_recovery_rate: Option<f64>,
    pub weak_recovery_rate: Option<f64>,
    pub strong_threshold: f64,
    pub bias_rho: f64,
    pub bias_beta: Vec<f64>,
    pub bias_gamma: Vec<f64>,
    pub support_size_estimated: usize,
    pub support_size_truth: usize,
}

pub fn recovery_metrics(
    estimated: &StructuralParams,
    truth: &StructuralParams,
    zero_tol: f64,
    strong_threshold: f64,
) -> Result<RecoveryMetrics> {
    let n = truth.n();
    if estimated.n() != n {
        return Err(Error::Dimension(format!(
            "estimated network has {} nodes, truth has {}",
            estimated.n(),
            n
        )));
    }
    if estimated.k() != truth.k() {
        return Err(Error::Dimension(format!(
            "estimated model has {} covariates, truth has {}",
            estimated.k(),
            truth.k()
        )));
    }

    let we = estimated.network.weights();
    let wt = truth.network.weights();

    let mut abs_sum = 0.0;
    let mut zeros = (0usize, 0usize); // (recovered, total) among true zeros
    let mut nonzeros = (0usize, 0usize);
    let mut strong = (0usize, 0usize);
    let mut weak = (0usize, 0usize);
    let mut support_est = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = we[(i, j)];
            let t = wt[(i, j)];
            abs_sum += (e - t).abs();
            let e_nonzero = e.abs() > zero_tol;
            if e_nonzero {
                support_est += 1;
            }
            if t.abs() > zero_tol {
                nonzeros.1 += 1;
                if e_nonzero {
                    nonzeros.0 += 1;
                }
                if t.abs() > strong_threshold {
                    strong.1 += 1;
                    if e_nonzero {
                        strong.0 += 1;
                    }
                } else {
                    weak.1 += 1;
                    if e_nonzero {
                        weak.0 += 1;
                    }
                }
            } else {
                zeros.1 += 1;
                if !e_nonzero {
                    zeros.0 += 1;
                }
            }
        }
    }
    let pairs = (n * (n - 1)) as f64;
    let rate = |(hit, total): (usize, usize)| {
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    };
    let opt_rate = |(hit, total): (usize, usize)| {
        if total == 0 {
            None
        } else {
            Some(hit as f64 / total as f64)
        }
    };

    let mad_pi = match (reduced_form(estimated), reduced_form(truth)) {
        (Ok(pe), Ok(pt)) => {
            let mut sum = 0.0;
            for k in 0..pt.k() {
                sum += (&pe.pi[k] - &pt.pi[k]).abs().sum();
            }
            Some(sum / (pt.k() as f64 * n as f64 * n as f64))
        }
        _ => None,
    };

    Ok(RecoveryMetrics {
        mad_w: abs_sum / pairs,
        mad_pi,
        zero_recovery_rate: rate(zeros),
        nonzero_recovery_rate: rate(nonzeros),
        strong_recovery_rate: opt_rate(strong),
        weak_recovery_rate: opt_rate(weak),
        strong_threshold,
        bias_rho: estimated.rho - truth.rho,
        bias_beta: estimated
            .beta
            .iter()
            .zip(&truth.beta)
            .map(|(e, t)| e - t)
            .collect(),
        bias_gamma: estimated
            .gamma
            .iter()
            .zip(&truth.gamma)
            .map(|(e, t)| e - t)
            .collect(),
        support_size_estimated: support_est,
        support_size_truth: nonzeros.1,
    })
}
