//! Replication harness: simulate panels on a fixed network, estimate each
//! one, and aggregate recovery quality per panel length.
//!
//! One network is drawn per campaign and shared across every cell of the
//! `T` grid, so replication `r` at two lengths differs only in the shocks;
//! paired comparisons of recovery error across lengths are then exact.
//! The first few replications of each cell search the full penalty grid;
//! the selected penalty is frozen at the coordinatewise median for the
//! rest, which cuts the grid cost without letting any replication pick
//! its own tuning on the cheap.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate, PenaltyConfig};
use crate::generators::{
    gen_erdos_renyi, gen_political_party, gen_standin_highschool, gen_standin_village,
};
use crate::gmm::GmmConfig;
use crate::netstats::{network_stats, recovery_metrics, NetworkStats, RecoveryMetrics};
use crate::network::Network;
use crate::params::StructuralParams;
use crate::rng::derive_rng;
use crate::simulate::{simulate_panel, ShockConfig};
use crate::twosls::TwoSlsFit;
use crate::DEFAULT_ZERO_TOL;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NetworkSpec {
    /// Sparse random network, one unit-weight link per row.
    ErdosRenyi { n: usize },
    /// Two groups with leaders, strong/weak link weights.
    Grouped { n: usize },
    /// Stand-in friendship network (70 nodes).
    Highschool,
    /// Stand-in village network (65 nodes).
    Village,
    /// Edge list on disk.
    File { path: String },
}

pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    match spec {
        NetworkSpec::ErdosRenyi { n } => gen_erdos_renyi(*n, seed),
        NetworkSpec::Grouped { n } => Ok(gen_political_party(*n, seed)?.network),
        NetworkSpec::Highschool => gen_standin_highschool(seed),
        NetworkSpec::Village => gen_standin_village(seed),
        NetworkSpec::File { path } => Ok(Network::from_edge_list_path(path)?.0),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub label: String,
    pub network: NetworkSpec,
    pub t_grid: Vec<usize>,
    pub replications: usize,
    /// Replications per cell that search the full penalty grid before the
    /// penalty is frozen; `0` disables freezing.
    pub calibration_replications: usize,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Edge weight above which a true link counts as strong.
    pub strong_threshold: f64,
    pub shocks: ShockConfig,
    pub penalty: PenaltyConfig,
    pub gmm: GmmConfig,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            label: "campaign".into(),
            network: NetworkSpec::ErdosRenyi { n: 30 },
            t_grid: vec![10, 100],
            replications: 50,
            calibration_replications: 10,
            rho: 0.3,
            beta: 0.4,
            gamma: 0.5,
            strong_threshold: 0.5,
            shocks: ShockConfig::default(),
            penalty: PenaltyConfig::default(),
            gmm: GmmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub t: usize,
    pub rep: usize,
    pub chosen_penalty: Option<(f64, f64, f64)>,
    pub bic: Option<f64>,
    pub support_size: Option<usize>,
    /// Units with the largest estimated out-degree, best first.
    pub top_out_degree: Vec<usize>,
    pub metrics: Option<RecoveryMetrics>,
    pub post: Option<TwoSlsFit>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub t: usize,
    pub completed: usize,
    pub failures: usize,
    /// Penalty used after calibration; `None` when freezing was disabled
    /// or every calibration replication failed.
    pub frozen_penalty: Option<(f64, f64, f64)>,
    /// Aggregates over successful replications, keyed by metric name.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignReport {
    pub label: String,
    pub seed: u64,
    pub config_digest: String,
    pub truth_rho: f64,
    pub truth_beta: f64,
    pub truth_gamma: f64,
    pub network: NetworkStats,
    pub warnings: Vec<String>,
    pub cells: Vec<CellSummary>,
    pub records: Vec<RepRecord>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable fingerprint of a campaign configuration, used to refuse resuming
/// from records produced under different settings.
pub fn config_digest(cfg: &CampaignConfig) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(serde_json::to_string(cfg)?.as_bytes())))
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    campaign: String,
    config_digest: String,
}

fn snap_to_grid(grid: &[f64], v: f64) -> f64 {
    grid.iter()
        .copied()
        .min_by(|a, b| {
            ((a - v).abs(), *a)
                .partial_cmp(&((b - v).abs(), *b))
                .expect("grid values are finite")
        })
        .unwrap_or(v)
}

fn lower_median(mut vals: Vec<f64>) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite penalties"));
    Some(vals[(vals.len() - 1) / 2])
}

fn freeze_penalty(
    base: &PenaltyConfig,
    calibration: &[RepRecord],
) -> Option<(PenaltyConfig, (f64, f64, f64))> {
    let chosen: Vec<(f64, f64, f64)> =
        calibration.iter().filter_map(|r| r.chosen_penalty).collect();
    let l1 = lower_median(chosen.iter().map(|p| p.0).collect())?;
    let l1a = lower_median(chosen.iter().map(|p| p.1).collect())?;
    let l2 = lower_median(chosen.iter().map(|p| p.2).collect())?;
    let point = (
        snap_to_grid(&base.grid_l1, l1),
        snap_to_grid(&base.grid_l1_adaptive, l1a),
        snap_to_grid(&base.grid_l2, l2),
    );
    let frozen = PenaltyConfig {
        grid_l1: vec![point.0],
        grid_l1_adaptive: vec![point.1],
        grid_l2: vec![point.2],
        adaptive_exponent: base.adaptive_exponent,
    };
    Some((frozen, point))
}

fn run_rep(
    cfg: &CampaignConfig,
    truth: &StructuralParams,
    cell: usize,
    t: usize,
    rep: usize,
    frozen: Option<&PenaltyConfig>,
) -> RepRecord {
    let mut shocks = cfg.shocks.clone();
    shocks.seed = derive_rng(cfg.seed, &[0x51, cell as u64, rep as u64]).gen::<u64>();
    let mut gmm = cfg.gmm.clone();
    gmm.seed = derive_rng(cfg.seed, &[0xE5, cell as u64, rep as u64]).gen::<u64>();
    let penalty = frozen.cloned().unwrap_or_else(|| cfg.penalty.clone());

    let outcome = simulate_panel(truth, t, &shocks)
        .and_then(|panel| estimate(&panel, &penalty, &gmm));
    match outcome {
        Ok(res) => {
            let stats =
                network_stats(&res.theta_hat.network, cfg.strong_threshold, gmm.zero_tol);
            let metrics =
                recovery_metrics(&res.theta_hat, truth, gmm.zero_tol, cfg.strong_threshold)
                    .ok();
            RepRecord {
                t,
                rep,
                chosen_penalty: Some(res.chosen_penalty),
                bic: Some(res.bic_value),
                support_size: Some(res.theta_hat.network.edge_count(gmm.zero_tol)),
                top_out_degree: stats.top_out_degree,
                metrics,
                post: res.post_estimate,
                error: None,
            }
        }
        Err(e) => RepRecord {
            t,
            rep,
            chosen_penalty: None,
            bic: None,
            support_size: None,
            top_out_degree: Vec::new(),
            metrics: None,
            post: None,
            error: Some(e.to_string()),
        },
    }
}

fn mean(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn sample_sd(vals: &[f64]) -> Option<f64> {
    if vals.len() < 2 {
        return None;
    }
    let m = mean(vals)?;
    Some(
        (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64)
            .sqrt(),
    )
}

fn summarize_cell(
    t: usize,
    truth: &StructuralParams,
    frozen_penalty: Option<(f64, f64, f64)>,
    records: &[RepRecord],
) -> CellSummary {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let mut metrics = BTreeMap::new();
    let mut put = |key: &str, v: Option<f64>| {
        if let Some(v) = v {
            metrics.insert(key.to_string(), v);
        }
    };
    let m = |f: &dyn Fn(&RecoveryMetrics) -> Option<f64>| -> Vec<f64> {
        ok.iter().filter_map(|r| r.metrics.as_ref().and_then(f)).collect()
    };

    put("mad_w_mean", mean(&m(&|x| Some(x.mad_w))));
    put("mad_w_sd", sample_sd(&m(&|x| Some(x.mad_w))));
    put("mad_pi_mean", mean(&m(&|x| x.mad_pi)));
    put("zero_recovery_mean", mean(&m(&|x| Some(x.zero_recovery_rate))));
    put("nonzero_recovery_mean", mean(&m(&|x| Some(x.nonzero_recovery_rate))));
    put("strong_recovery_mean", mean(&m(&|x| x.strong_recovery_rate)));
    put("weak_recovery_mean", mean(&m(&|x| x.weak_recovery_rate)));
    put(
        "support_size_mean",
        mean(&m(&|x| Some(x.support_size_estimated as f64))),
    );
    put("rho_bias_mean", mean(&m(&|x| Some(x.bias_rho))));
    put("rho_bias_sd", sample_sd(&m(&|x| Some(x.bias_rho))));
    put("rho_abs_bias_mean", mean(&m(&|x| Some(x.bias_rho.abs()))));
    put("beta_bias_mean", mean(&m(&|x| x.bias_beta.first().copied())));
    put("gamma_bias_mean", mean(&m(&|x| x.bias_gamma.first().copied())));
    put(
        "gamma_abs_bias_mean",
        mean(&m(&|x| x.bias_gamma.first().map(|g| g.abs()))),
    );
    put(
        "bic_mean",
        mean(&ok.iter().filter_map(|r| r.bic).collect::<Vec<f64>>()),
    );

    let post = |f: &dyn Fn(&TwoSlsFit) -> Option<f64>| -> Vec<f64> {
        ok.iter().filter_map(|r| r.post.as_ref().and_then(f)).collect()
    };
    put(
        "post_rho_bias_mean",
        mean(&post(&|p| Some(p.rho - truth.rho))),
    );
    put(
        "post_rho_abs_bias_mean",
        mean(&post(&|p| Some((p.rho - truth.rho).abs()))),
    );
    put(
        "post_beta_bias_mean",
        mean(&post(&|p| p.beta.first().map(|b| b - truth.beta[0]))),
    );
    put(
        "post_beta_abs_bias_mean",
        mean(&post(&|p| p.beta.first().map(|b| (b - truth.beta[0]).abs()))),
    );
    put(
        "post_gamma_bias_mean",
        mean(&post(&|p| p.gamma.first().map(|g| g - truth.gamma[0]))),
    );
    put(
        "post_gamma_abs_bias_mean",
        mean(&post(&|p| p.gamma.first().map(|g| (g - truth.gamma[0]).abs()))),
    );

    CellSummary {
        t,
        completed: ok.len(),
        failures: records.len() - ok.len(),
        frozen_penalty,
        metrics,
    }
}

/// Runs the full grid of cells and replications.
///
/// With `record_dir` set, every finished replication is appended to
/// `records.ldjson` in that directory and a rerun resumes from whatever
/// the file already holds, provided it was produced by an identical
/// configuration.  Reports contain no timing, so a campaign's output is a
/// pure function of its configuration.
pub fn run_campaign(cfg: &CampaignConfig, record_dir: Option<&Path>) -> Result<CampaignReport> {
    if cfg.t_grid.is_empty() {
        return Err(Error::Invalid("t_grid must not be empty".into()));
    }
    if cfg.t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("t_grid must be strictly increasing".into()));
    }
    if cfg.replications == 0 {
        return Err(Error::Invalid("replications must be positive".into()));
    }

    let network = build_network(&cfg.network, cfg.seed)?;
    let truth = StructuralParams::univariate(network, cfg.rho, cfg.beta, cfg.gamma)?;
    let mut warnings = truth
        .check_assumptions(DEFAULT_ZERO_TOL)
        .all_pass
        .then(Vec::new)
        .unwrap_or_else(|| {
            vec!["the campaign's true parameters violate identification assumptions".into()]
        });
    warnings.extend(cfg.shocks.validate()?);

    let digest = config_digest(cfg)?;
    let mut existing: BTreeMap<(usize, usize), RepRecord> = BTreeMap::new();
    let mut writer = None;
    if let Some(dir) = record_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("records.ldjson");
        if path.exists() {
            let reader = BufReader::new(fs::File::open(&path)?);
            let mut lines = reader.lines();
            let header_line = lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Invalid("record file is empty".into()))?;
            let header: RecordHeader = serde_json::from_str(&header_line)?;
            if header.config_digest != digest {
                return Err(Error::Invalid(format!(
                    "record file {} was produced by a different configuration",
                    path.display()
                )));
            }
            for line in lines {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RepRecord = serde_json::from_str(&line)?;
                existing.insert((rec.t, rec.rep), rec);
            }
        } else {
            let mut f = fs::File::create(&path)?;
            let header = RecordHeader {
                campaign: cfg.label.clone(),
                config_digest: digest.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&header)?)?;
        }
        writer = Some(fs::OpenOptions::new().append(true).open(&path)?);
    }

    let calib = cfg.calibration_replications.min(cfg.replications);
    let mut cells = Vec::with_capacity(cfg.t_grid.len());
    let mut records = Vec::with_capacity(cfg.t_grid.len() * cfg.replications);
    for (ci, &t) in cfg.t_grid.iter().enumerate() {
        let mut cell_records: Vec<RepRecord> = Vec::with_capacity(cfg.replications);
        let mut frozen: Option<(PenaltyConfig, (f64, f64, f64))> = None;
        // Calibration replications see the full grid; the rest run at the
        // frozen penalty.  Each phase fans out over replications -- every
        // replication derives its own streams from (seed, cell, rep), and
        // the ordered collect keeps outputs independent of scheduling.
        for (lo, hi) in [(0, calib), (calib, cfg.replications)] {
            if lo >= hi {
                continue;
            }
            if lo == calib && calib > 0 {
                frozen = freeze_penalty(&cfg.penalty, &cell_records);
                if frozen.is_none() {
                    warnings.push(format!(
                        "cell T={t}: every calibration replication failed; the full \
                         penalty grid stays active"
                    ));
                }
            }
            let frozen_grid = frozen.as_ref().map(|f| &f.0);
            let computed: Vec<Option<RepRecord>> = (lo..hi)
                .into_par_iter()
                .map(|rep| {
                    if existing.contains_key(&(t, rep)) {
                        None
                    } else {
                        Some(run_rep(cfg, &truth, ci, t, rep, frozen_grid))
                    }
                })
                .collect();
            for (rep, maybe) in (lo..hi).zip(computed) {
                let record = match maybe {
                    Some(r) => {
                        if let Some(w) = writer.as_mut() {
                            writeln!(w, "{}", serde_json::to_string(&r)?)?;
                        }
                        r
                    }
                    None => existing[&(t, rep)].clone(),
                };
                cell_records.push(record);
            }
        }
        cells.push(summarize_cell(
            t,
            &truth,
            frozen.map(|f| f.1),
            &cell_records,
        ));
        records.extend(cell_records);
    }

    Ok(CampaignReport {
        label: cfg.label.clone(),
        seed: cfg.seed,
        config_digest: digest,
        truth_rho: cfg.rho,
        truth_beta: cfg.beta,
        truth_gamma: cfg.gamma,
        network: network_stats(&truth.network, cfg.strong_threshold, DEFAULT_ZERO_TOL),
        warnings,
        cells,
        records,
    })
}

/// One row per cell; aggregate columns are unioned across cells and empty
/// where a cell has no data for them.
pub fn write_cells_csv<W: IoWrite>(report: &CampaignReport, out: W) -> Result<()> {
    let keys: BTreeSet<&str> = report
        .cells
        .iter()
        .flat_map(|c| c.metrics.keys().map(|k| k.as_str()))
        .collect();
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![
        "label".to_string(),
        "t".into(),
        "completed".into(),
        "failures".into(),
        "penalty_l1".into(),
        "penalty_l1_adaptive".into(),
        "penalty_l2".into(),
    ];
    header.extend(keys.iter().map(|k| k.to_string()));
    wtr.write_record(&header)?;
    for cell in &report.cells {
        let mut row = vec![
            report.label.clone(),
            cell.t.to_string(),
            cell.completed.to_string(),
            cell.failures.to_string(),
        ];
        match cell.frozen_penalty {
            Some((a, b, c)) => {
                row.push(format!("{a}"));
                row.push(format!("{b}"));
                row.push(format!("{c}"));
            }
            None => row.extend([String::new(), String::new(), String::new()]),
        }
        for k in &keys {
            row.push(
                cell.metrics
                    .get(*k)
                    .map(|v| format!("{v}"))
                    .unwrap_or_default(),
            );
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
