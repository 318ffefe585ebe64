use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use panelnet::campaign::{build_network, run_campaign, write_cells_csv, CampaignConfig, NetworkSpec};
use panelnet::counterfactual::{compare_networks, NetworkComparison, ShockScenario};
use panelnet::estimator::{estimate, PenaltyConfig};
use panelnet::gmm::GmmConfig;
use panelnet::netstats::network_stats;
use panelnet::network::Network;
use panelnet::panel::PanelData;
use panelnet::params::StructuralParams;
use panelnet::simulate::{simulate_panel, ShockConfig};
use panelnet::wald::rowsum_wald_test;
use panelnet::{Error, Result, DEFAULT_ZERO_TOL};

use crate::manifest::{prepare_out_dir, Run};
use crate::RunFlags;

// ---------------------------------------------------------------------------
// Shared plumbing.

fn require_out_dir(flags: &RunFlags, command: &str) -> Result<PathBuf> {
    flags
        .out_dir
        .clone()
        .ok_or_else(|| Error::Invalid(format!("`{command}` writes files; pass --out-dir")))
}

fn read_config(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(raw: &[u8], path: &Path) -> Result<T> {
    let text = std::str::from_utf8(raw)
        .map_err(|_| Error::Invalid(format!("{}: config is not UTF-8", path.display())))?;
    toml::from_str(text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Io and Csv errors carry no file name; attach it, keeping the
/// input-error classification (still exit code 2).
fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Invalid(format!("{}: {e}", path.display())),
        Error::Csv(e) => Error::Invalid(format!("{}: {e}", path.display())),
        other => other,
    }
}

fn load_network(path: &Path) -> Result<(Network, Vec<String>)> {
    Network::from_edge_list_path(path).map_err(|e| with_path(e, path))
}

fn load_panel(path: &Path) -> Result<PanelData> {
    PanelData::from_long_csv_path(path).map_err(|e| with_path(e, path))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Number of panel periods.
    pub t: usize,
    pub rho: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    pub network: NetworkSpec,
    #[serde(default)]
    pub shocks: ShockConfig,
}

pub fn simulate(flags: &RunFlags, config_path: &Path) -> Result<()> {
    let out_dir = require_out_dir(flags, "simulate")?;
    let raw = read_config(config_path)?;
    let cfg: SimulateConfig = parse_toml(&raw, config_path)?;
    let seed = flags.seed.unwrap_or(cfg.seed);

    let network = build_network(&cfg.network, seed)?;
    let theta = StructuralParams::new(network, cfg.rho, cfg.beta.clone(), cfg.gamma.clone())?;
    // The spectral bound is a precondition for the simulated process to be
    // well defined, so a violating config is rejected up front; the remaining
    // assumptions are identification conditions and only checked on request.
    let a2 = theta.check_assumptions(DEFAULT_ZERO_TOL).a2_spectral_bound;
    if !a2.pass {
        return Err(Error::Invalid(format!(
            "config violates the spectral bound: |rho| and the max row sum of \
             |rho W| must both be < 1, got row-sum statistic {:.4} at rho = {}",
            a2.statistic, cfg.rho
        )));
    }
    let mut shocks = cfg.shocks.clone();
    shocks.seed = seed;
    let panel = simulate_panel(&theta, cfg.t, &shocks)?;

    prepare_out_dir(&out_dir)?;
    let mut run = Run::new("simulate");
    run.set_config(&raw);
    run.set_seed(seed);
    let mut file = fs::File::create(out_dir.join("panel.csv"))?;
    panel.write_long_csv(&mut file)?;
    run.record("panel.csv");
    run.write_json(&out_dir, "truth.json", &theta)?;
    run.finish(&out_dir)
}

// ---------------------------------------------------------------------------
// estimate

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub gmm: GmmConfig,
    pub penalty: PenaltyConfig,
}

fn parse_grid(spec: &str) -> Result<(f64, f64, f64)> {
    let bad = || {
        Error::Invalid(format!(
            "--grid expects `l1:l1-adaptive:l2` with nonnegative finite numbers, got `{spec}`"
        ))
    };
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    match parts.as_slice() {
        [l1, l1a, l2] if parts.iter().all(|v| v.is_finite() && *v >= 0.0) => Ok((*l1, *l1a, *l2)),
        _ => Err(bad()),
    }
}

pub fn run_estimate(
    flags: &RunFlags,
    panel_path: &Path,
    config_path: Option<&Path>,
    grid: Option<&str>,
) -> Result<()> {
    let out_dir = require_out_dir(flags, "estimate")?;
    let mut raw = Vec::new();
    let mut cfg = EstimateConfig::default();
    if let Some(path) = config_path {
        raw = read_config(path)?;
        cfg = parse_toml(&raw, path)?;
    }
    if let Some(spec) = grid {
        let (l1, l1a, l2) = parse_grid(spec)?;
        cfg.penalty.grid_l1 = vec![l1];
        cfg.penalty.grid_l1_adaptive = vec![l1a];
        cfg.penalty.grid_l2 = vec![l2];
    }
    if let Some(seed) = flags.seed {
        cfg.gmm.seed = seed;
    }
    let panel = load_panel(panel_path)?;
    let result = estimate(&panel, &cfg.penalty, &cfg.gmm)?;

    prepare_out_dir(&out_dir)?;
    let mut run = Run::new("estimate");
    if !raw.is_empty() {
        run.set_config(&raw);
    }
    run.set_seed(cfg.gmm.seed);
    run.write_json(&out_dir, "estimate.json", &result)?;
    let mut file = fs::File::create(out_dir.join("w_hat.csv"))?;
    result.theta_hat.network.write_edge_list(None, &mut file)?;
    run.record("w_hat.csv");
    run.finish(&out_dir)
}

// ---------------------------------------------------------------------------
// campaign

pub fn campaign(flags: &RunFlags, config_path: &Path) -> Result<()> {
    let out_dir = require_out_dir(flags, "campaign")?;
    let raw = read_config(config_path)?;
    let mut cfg: CampaignConfig = parse_toml(&raw, config_path)?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    // Replication records stream into records.ldjson as they finish, so a
    // killed run resumes instead of starting over.
    prepare_out_dir(&out_dir)?;
    let report = run_campaign(&cfg, Some(&out_dir))?;

    let mut run = Run::new("campaign");
    run.set_config(&raw);
    run.set_seed(cfg.seed);
    run.record("records.ldjson");
    run.write_json(&out_dir, "report.json", &report)?;
    let mut file = fs::File::create(out_dir.join("cells.csv"))?;
    write_cells_csv(&report, &mut file)?;
    run.record("cells.csv");
    run.finish(&out_dir)
}

// ---------------------------------------------------------------------------
// stats

pub fn stats(flags: &RunFlags, network_path: &Path, strong_threshold: f64) -> Result<()> {
    let (network, _) = load_network(network_path)?;
    let report = network_stats(&network, strong_threshold, DEFAULT_ZERO_TOL);
    print_json(&report)?;
    if let Some(out_dir) = &flags.out_dir {
        prepare_out_dir(out_dir)?;
        let mut run = Run::new("stats");
        run.write_json(out_dir, "stats.json", &report)?;
        run.finish(out_dir)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// counterfactual

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Origin {
    Index(usize),
    Label(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualConfig {
    pub network_a: PathBuf,
    pub network_b: PathBuf,
    pub rho: f64,
    /// Unit the shock originates from: an index or a label from network_a.
    pub origin: Origin,
    pub shock_size: f64,
    /// Pre-shock outcomes; defaults to zeros.
    #[serde(default)]
    pub baseline: Option<Vec<f64>>,
}

fn upsilon_csv(cmp: &NetworkComparison, labels: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["unit", "upsilon", "defined"])?;
    for (i, ratio) in cmp.log_ratio.iter().enumerate() {
        let upsilon = match ratio {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        let defined = if ratio.is_some() { "true" } else { "false" };
        w.write_record([labels[i].as_str(), &upsilon, defined])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn counterfactual(flags: &RunFlags, config_path: &Path) -> Result<()> {
    let raw = read_config(config_path)?;
    let cfg: CounterfactualConfig = parse_toml(&raw, config_path)?;
    let (network_a, labels) = load_network(&cfg.network_a)?;
    let (network_b, _) = load_network(&cfg.network_b)?;
    let origin_unit = match &cfg.origin {
        Origin::Index(i) => *i,
        Origin::Label(name) => labels.iter().position(|l| l == name).ok_or_else(|| {
            Error::Invalid(format!(
                "origin `{name}` is not a unit label in {}",
                cfg.network_a.display()
            ))
        })?,
    };
    let n = network_a.n();
    let scenario = ShockScenario {
        network_a,
        network_b,
        rho: cfg.rho,
        origin_unit,
        shock_size: cfg.shock_size,
        baseline_outcomes: cfg.baseline.clone().unwrap_or_else(|| vec![0.0; n]),
    };
    let comparison = compare_networks(&scenario)?;
    let csv_text = upsilon_csv(&comparison, &labels)?;
    io::stdout().write_all(csv_text.as_bytes())?;
    if let Some(out_dir) = &flags.out_dir {
        prepare_out_dir(out_dir)?;
        let mut run = Run::new("counterfactual");
        run.set_config(&raw);
        fs::write(out_dir.join("counterfactual.csv"), &csv_text)?;
        run.record("counterfactual.csv");
        run.write_json(out_dir, "comparison.json", &comparison)?;
        run.finish(out_dir)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// check

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Network edge list, checked together with --rho/--beta/--gamma.
    #[arg(
        long,
        value_name = "FILE",
        required_unless_present = "theta",
        conflicts_with = "theta"
    )]
    pub network: Option<PathBuf>,
    /// Full parameter point as JSON, e.g. the truth.json written by simulate.
    #[arg(long, value_name = "FILE")]
    pub theta: Option<PathBuf>,
    /// Endogenous-effect coefficient used with --network.
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub rho: f64,
    /// Own-covariate coefficient used with --network.
    #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
    pub beta: f64,
    /// Neighbor-covariate coefficient used with --network.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub gamma: f64,
    /// Slack for the equality-style checks.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

pub fn check(flags: &RunFlags, args: &CheckArgs) -> Result<()> {
    let theta = match (&args.network, &args.theta) {
        (Some(path), None) => {
            let (network, _) = load_network(path)?;
            StructuralParams::univariate(network, args.rho, args.beta, args.gamma)?
        }
        (None, Some(path)) => {
            let raw = fs::read(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            serde_json::from_slice(&raw)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        }
        _ => unreachable!("clap enforces exactly one of --network/--theta"),
    };
    let report = theta.check_assumptions(args.tol);
    // A failed assumption is a finding, not an error: exit code stays 0.
    print_json(&report)?;
    if let Some(out_dir) = &flags.out_dir {
        prepare_out_dir(out_dir)?;
        let mut run = Run::new("check");
        run.write_json(out_dir, "check.json", &report)?;
        run.finish(out_dir)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rowsum-test

pub fn rowsum_test(flags: &RunFlags, panel_path: &Path) -> Result<()> {
    let panel = load_panel(panel_path)?;
    let report = rowsum_wald_test(&panel)?;
    print_json(&report)?;
    if let Some(out_dir) = &flags.out_dir {
        prepare_out_dir(out_dir)?;
        let mut run = Run::new("rowsum-test");
        run.write_json(out_dir, "wald.json", &report)?;
        run.finish(out_dir)?;
    }
    Ok(())
}
