//! Synthetic network generators for simulation studies.
//!
//! All generators resample until the squared-diagonal heterogeneity needed
//! for scale identification holds (`sd(diag W^2) > 0`), since e.g. a draw
//! with no reciprocated pair fails it and would make the design unusable.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::diag_w2_sd;
use crate::rng::{derive_rng, Rng};
use crate::DEFAULT_ZERO_TOL;

const TAG_ERDOS_RENYI: u64 = 1;
const TAG_PARTY: u64 = 2;
const TAG_WEIGHTS: u64 = 3;
const TAG_STANDIN: u64 = 4;

const MAX_ATTEMPTS: u64 = 10_000;
const HETEROGENEITY_TOL: f64 = 1e-9;

fn random_other(rng: &mut Rng, n: usize, exclude: &[usize]) -> usize {
    loop {
        let j = rand::Rng::gen_range(rng, 0..n);
        if !exclude.contains(&j) {
            return j;
        }
    }
}

/// One uniformly-random link per unit, weight one.  Rejects draws without
/// enough reciprocal feedback for scale identification.
pub fn gen_erdos_renyi(n: usize, seed: u64) -> Result<Network> {
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 units for a random one-link network, got {n}"
        )));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = derive_rng(seed, &[TAG_ERDOS_RENYI, attempt]);
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            w[(i, random_other(&mut rng, n, &[i]))] = 1.0;
        }
        if diag_w2_sd(&w) > HETEROGENEITY_TOL {
            return Ok(Network::new(w)?);
        }
    }
    Err(Error::NonConvergence(
        "no admissible one-link network found; squared diagonal stayed flat".into(),
    ))
}

/// Two groups, each with a designated leader listened to by half of its
/// members, plus one random link per unit.
#[derive(Debug, Clone)]
pub struct GroupedNetwork {
    pub network: Network,
    pub leader_a: usize,
    pub leader_b: usize,
    /// Node indices of the smaller group, leader included.
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
}

/// Grouped design: group A holds a rounded third of the units (leader
/// first), group B the rest.  `floor(size/2)` members of each group follow
/// their leader; every unit additionally follows one random distinct unit.
/// Weight assignment is delegated to [`assign_strong_weak`], so a follower
/// of two units splits 0.7/0.3 and single links carry weight one.
pub fn gen_political_party(n: usize, seed: u64) -> Result<GroupedNetwork> {
    let size_a = ((n as f64) / 3.0).round() as usize;
    if size_a < 2 || n - size_a < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 units per group, got sizes {} and {}",
            size_a,
            n.saturating_sub(size_a)
        )));
    }
    let leader_a = 0usize;
    let leader_b = size_a;

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = derive_rng(seed, &[TAG_PARTY, attempt]);
        let mut w: DMatrix<f64> = DMatrix::zeros(n, n);

        // Half of each group's members (leader excluded from the draw, since
        // a leader cannot follow itself) link to the leader.
        for (leader, members) in [(leader_a, 0..size_a), (leader_b, size_a..n)] {
            let candidates: Vec<usize> = members.filter(|&i| i != leader).collect();
            let picks = (candidates.len() + 1) / 2; // floor(group_size / 2)
            let chosen = partial_shuffle(&mut rng, &candidates, picks);
            for i in chosen {
                w[(i, leader)] = 1.0;
            }
        }

        // One random link per unit, distinct from any existing one.
        for i in 0..n {
            let existing: Vec<usize> = (0..n)
                .filter(|&j| j == i || w[(i, j)] != 0.0)
                .collect();
            let j = random_other(&mut rng, n, &existing);
            w[(i, j)] = 1.0;
        }

        let weighted = assign_strong_weak_rng(&Network::new(w)?, &mut rng)?;
        if diag_w2_sd(weighted.weights()) > HETEROGENEITY_TOL {
            return Ok(GroupedNetwork {
                network: weighted,
                leader_a,
                leader_b,
                group_a: (0..size_a).collect(),
                group_b: (size_a..n).collect(),
            });
        }
    }
    Err(Error::NonConvergence(
        "no admissible grouped network found; squared diagonal stayed flat".into(),
    ))
}

fn partial_shuffle(rng: &mut Rng, pool: &[usize], count: usize) -> Vec<usize> {
    let mut pool = pool.to_vec();
    let count = count.min(pool.len());
    for i in 0..count {
        let j = rand::Rng::gen_range(rng, i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Replaces the weights on an existing support: in each row one randomly
/// chosen link gets weight 0.7 and the rest split 0.3 evenly; a single link
/// gets weight one.  Rows stay normalized.
pub fn assign_strong_weak(net: &Network, seed: u64) -> Result<Network> {
    let mut rng = derive_rng(seed, &[TAG_WEIGHTS]);
    assign_strong_weak_rng(net, &mut rng)
}

fn assign_strong_weak_rng(net: &Network, rng: &mut Rng) -> Result<Network> {
    let n = net.n();
    let old = net.weights();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let links: Vec<usize> = (0..n)
            .filter(|&j| j != i && old[(i, j)].abs() > DEFAULT_ZERO_TOL)
            .collect();
        match links.len() {
            0 => {}
            1 => w[(i, links[0])] = 1.0,
            l => {
                let strong = links[rand::Rng::gen_range(rng, 0..l)];
                for &j in &links {
                    w[(i, j)] = if j == strong {
                        0.7
                    } else {
                        0.3 / (l - 1) as f64
                    };
                }
            }
        }
    }
    Network::new(w)
}

/// Random network with a fixed total edge count and mildly heterogeneous
/// row degrees, rows weighted equally and normalized.  Used to mirror the
/// size and density of observed friendship and village networks without
/// shipping any observed data.
pub fn gen_standin(n: usize, edges: usize, seed: u64) -> Result<Network> {
    if n < 3 {
        return Err(Error::Invalid(format!("need at least 3 units, got {n}")));
    }
    if edges > n * (n - 1) {
        return Err(Error::Invalid(format!(
            "{edges} edges do not fit in a {n}-node network"
        )));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = derive_rng(seed, &[TAG_STANDIN, attempt]);

        // Degree plan: one link per row while supply lasts, extras assigned
        // to random rows.
        let mut counts = vec![0usize; n];
        if edges >= n {
            counts.fill(1);
            let mut extra = edges - n;
            while extra > 0 {
                let r = rand::Rng::gen_range(&mut rng, 0..n);
                if counts[r] < n - 1 {
                    counts[r] += 1;
                    extra -= 1;
                }
            }
        } else {
            for i in partial_shuffle(&mut rng, &(0..n).collect::<Vec<_>>(), edges) {
                counts[i] = 1;
            }
        }

        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            if counts[i] == 0 {
                continue;
            }
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let targets = partial_shuffle(&mut rng, &others, counts[i]);
            let weight = 1.0 / counts[i] as f64;
            for j in targets {
                w[(i, j)] = weight;
            }
        }
        if diag_w2_sd(&w) > HETEROGENEITY_TOL {
            return Ok(Network::new(w)?);
        }
    }
    Err(Error::NonConvergence(
        "no admissible fixed-edge-count network found".into(),
    ))
}

/// Stand-in matching a 70-node friendship network at 7.58% density.
pub fn gen_standin_highschool(seed: u64) -> Result<Network> {
    gen_standin(70, (0.0758f64 * (70 * 69) as f64).round() as usize, seed)
}

/// Stand-in matching a 65-node village network at 5.07% density.
pub fn gen_standin_village(seed: u64) -> Result<Network> {
    gen_standin(65, (0.0507f64 * (65 * 64) as f64).round() as usize, seed)
}
