use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panelnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn schema_required(name: &str) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    read_json(&path)["required"]
        .as_array()
        .expect("schema has a required list")
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

fn assert_matches_schema(doc: &Value, schema: &str) {
    for key in schema_required(schema) {
        assert!(
            doc.get(&key).is_some(),
            "{schema}: emitted JSON is missing required field `{key}`"
        );
    }
}

const SIM_MINIMAL: &str = "t = 10\n\
    rho = 0.3\n\
    beta = [0.4]\n\
    gamma = [0.5]\n\
    seed = 1\n\
    \n\
    [network]\n\
    kind = \"erdos-renyi\"\n\
    n = 5\n";

/// Noise-free design: covariates still vary, but outcomes are an exact
/// function of them.
const SIM_NOISELESS: &str = "t = 40\n\
    rho = 0.3\n\
    beta = [0.4]\n\
    gamma = [0.5]\n\
    seed = 2\n\
    \n\
    [network]\n\
    kind = \"erdos-renyi\"\n\
    n = 4\n\
    \n\
    [shocks]\n\
    unit_effects = false\n\
    time_effects = false\n\
    noise_scale = 0.0\n";

fn simulate_into(dir: &Path, config: &str) -> std::path::PathBuf {
    let cfg = dir.join("sim.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("sim_out");
    assert_ok(&run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]));
    out
}

#[test]
fn simulate_writes_panel_truth_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = simulate_into(dir.path(), SIM_MINIMAL);

    let panel = fs::read_to_string(out.join("panel.csv")).unwrap();
    assert_eq!(panel.lines().count(), 51, "header plus 5 units x 10 periods");
    assert!(panel.starts_with("unit,time,y,x1"));

    let truth = read_json(&out.join("truth.json"));
    assert_matches_schema(&truth, "structural-params.schema.json");
    assert_eq!(truth["network"]["n"], 5);
    assert_eq!(truth["rho"], 0.3);

    let manifest = read_json(&out.join("manifest.json"));
    assert_matches_schema(&manifest, "manifest.schema.json");
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["panel.csv", "truth.json"]);
}

#[test]
fn simulate_rejects_a_spectral_bound_violation_with_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SIM_MINIMAL.replace("rho = 0.3", "rho = 1.5")).unwrap();
    let out = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr(&out).contains("spectral bound"),
        "stderr should cite the violated bound: {}",
        stderr(&out)
    );
}

#[test]
fn simulate_reruns_are_byte_identical_outside_the_manifest() {
    let dir = TempDir::new().unwrap();
    let a = simulate_into(dir.path(), SIM_MINIMAL);
    let sub = dir.path().join("again");
    fs::create_dir(&sub).unwrap();
    let b = simulate_into(&sub, SIM_MINIMAL);
    for name in ["panel.csv", "truth.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn simulate_without_out_dir_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, SIM_MINIMAL).unwrap();
    let out = run(&["simulate", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("--out-dir"));
}

#[test]
fn simulate_unknown_config_key_is_reported_with_its_name() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, format!("typo_key = 3\n{SIM_MINIMAL}")).unwrap();
    let out = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("typo_key"), "{}", stderr(&out));
}

#[test]
fn estimate_pipeline_writes_result_and_edge_list() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(dir.path(), SIM_NOISELESS);
    let est_cfg = dir.path().join("est.toml");
    fs::write(&est_cfg, "[gmm]\nparticle_count = 20\nswarm_iterations = 40\n").unwrap();
    let est = dir.path().join("est_out");
    assert_ok(&run(&[
        "estimate",
        sim.join("panel.csv").to_str().unwrap(),
        "--config",
        est_cfg.to_str().unwrap(),
        "--grid",
        "0.05:0.05:0.0",
        "--out-dir",
        est.to_str().unwrap(),
    ]));

    let result = read_json(&est.join("estimate.json"));
    assert_matches_schema(&result, "estimation-result.schema.json");
    assert_eq!(result["theta_hat"]["network"]["n"], 4);
    assert_eq!(result["chosen_penalty"].as_array().unwrap().len(), 3);

    let edges = fs::read_to_string(est.join("w_hat.csv")).unwrap();
    assert!(edges.starts_with("from,to,weight"));

    let manifest = read_json(&est.join("manifest.json"));
    assert_eq!(manifest["command"], "estimate");
}

#[test]
fn estimate_with_a_pinned_zero_grid_fits_noiseless_data_exactly() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(dir.path(), SIM_NOISELESS);
    let est_cfg = dir.path().join("est.toml");
    fs::write(&est_cfg, "[gmm]\nparticle_count = 30\nswarm_iterations = 80\n").unwrap();
    let est = dir.path().join("est_out");
    assert_ok(&run(&[
        "estimate",
        sim.join("panel.csv").to_str().unwrap(),
        "--config",
        est_cfg.to_str().unwrap(),
        "--grid",
        "0:0:0",
        "--out-dir",
        est.to_str().unwrap(),
    ]));
    let result = read_json(&est.join("estimate.json"));
    let moment_norm = result["moment_norm"].as_f64().unwrap();
    assert!(
        moment_norm <= 1e-6,
        "unpenalized fit on noise-free data should be exact, got {moment_norm:.3e}"
    );
}

#[test]
fn estimate_on_a_missing_panel_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "estimate",
        dir.path().join("no_such.csv").to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("no_such.csv"), "{}", stderr(&out));
}

#[test]
fn estimate_rejects_a_malformed_grid_flag() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(dir.path(), SIM_MINIMAL);
    for bad in ["0.05", "a:b:c", "0.1:0.1:-0.2"] {
        let out = run(&[
            "estimate",
            sim.join("panel.csv").to_str().unwrap(),
            "--grid",
            bad,
            "--out-dir",
            dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 2, "grid `{bad}` should be rejected");
    }
}

#[test]
fn stats_reports_the_fixture_density() {
    let out = run(&["stats", &fixture("er30.csv")]);
    assert_ok(&out);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_matches_schema(&doc, "network-stats.schema.json");
    assert_eq!(doc["n"], 30);
    let density = doc["density"].as_f64().unwrap();
    assert!(
        (density - 0.0345).abs() <= 1e-4,
        "30 links among 30 units should have density 0.0345, got {density}"
    );
}

#[test]
fn stats_writes_a_report_file_when_asked() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "stats",
        &fixture("er30.csv"),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let file_doc = read_json(&out_dir.join("stats.json"));
    let stdout_doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(file_doc, stdout_doc);
    assert_eq!(read_json(&out_dir.join("manifest.json"))["command"], "stats");
}

#[test]
fn check_flags_the_pentagon_as_unidentified_but_exits_0() {
    let out = run(&["check", "--network", &fixture("pentagon.csv")]);
    assert_eq!(exit_code(&out), 0, "diagnostic failure is not an error");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_matches_schema(&doc, "assumption-report.schema.json");
    assert_eq!(doc["a5_squared_diag_heterogeneous"]["pass"], false);
    assert_eq!(doc["all_pass"], false);
}

#[test]
fn check_accepts_a_simulated_truth_file() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(dir.path(), SIM_MINIMAL);
    let out = run(&["check", "--theta", sim.join("truth.json").to_str().unwrap()]);
    assert_ok(&out);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["a2_spectral_bound"]["pass"], true);
}

#[test]
fn check_requires_exactly_one_parameter_source() {
    let neither = run(&["check"]);
    assert_eq!(exit_code(&neither), 2);
    let both = run(&[
        "check",
        "--network",
        &fixture("pentagon.csv"),
        "--theta",
        &fixture("pentagon.csv"),
    ]);
    assert_eq!(exit_code(&both), 2);
}

#[test]
fn rowsum_test_prints_a_wald_report() {
    let dir = TempDir::new().unwrap();
    let sim = simulate_into(dir.path(), &SIM_MINIMAL.replace("t = 10", "t = 60"));
    let out = run(&["rowsum-test", sim.join("panel.csv").to_str().unwrap()]);
    assert_ok(&out);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_matches_schema(&doc, "wald-report.schema.json");
    assert_eq!(doc["dof"], 4, "N - 1 restrictions for 5 units");
    let p = doc["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn counterfactual_writes_the_upsilon_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cf.toml");
    fs::write(
        &cfg,
        format!(
            "network_a = '{a}'\n\
             network_b = '{b}'\n\
             rho = 0.3\n\
             origin = 2\n\
             shock_size = 0.5\n\
             baseline = [1.0, 1.0, 1.0, 1.0, 1.0]\n",
            a = fixture("pentagon.csv"),
            b = fixture("chain5.csv"),
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "counterfactual",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let csv_text = fs::read_to_string(out_dir.join("counterfactual.csv")).unwrap();
    assert_eq!(csv_text, String::from_utf8_lossy(&out.stdout));
    let mut lines = csv_text.lines();
    assert_eq!(lines.next(), Some("unit,upsilon,defined"));
    assert_eq!(lines.count(), 5, "one row per unit");

    let cmp = read_json(&out_dir.join("comparison.json"));
    assert_matches_schema(&cmp, "network-comparison.schema.json");
    assert_eq!(cmp["origin_unit"], 2);
}

#[test]
fn counterfactual_resolves_labeled_origins() {
    let dir = TempDir::new().unwrap();
    let labeled = dir.path().join("labeled.csv");
    // Two units with reciprocal influence, named rather than indexed.
    fs::write(&labeled, "from,to,weight\nnorth,south,1\nsouth,north,1\n").unwrap();
    let cfg = dir.path().join("cf.toml");
    fs::write(
        &cfg,
        format!(
            "network_a = '{p}'\n\
             network_b = '{p}'\n\
             rho = 0.2\n\
             origin = \"south\"\n\
             shock_size = 1.0\n\
             baseline = [1.0, 1.0]\n",
            p = labeled.display()
        ),
    )
    .unwrap();
    let out = run(&["counterfactual", cfg.to_str().unwrap()]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.lines().any(|l| l.starts_with("north,")));

    let missing = run(&["counterfactual", {
        fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("south", "west")).unwrap();
        cfg.to_str().unwrap()
    }]);
    assert_eq!(exit_code(&missing), 2);
    assert!(stderr(&missing).contains("west"));
}

const CAMPAIGN_MINI: &str = "label = \"mini\"\n\
    t_grid = [10]\n\
    replications = 2\n\
    calibration_replications = 1\n\
    seed = 5\n\
    \n\
    [network]\n\
    kind = \"erdos-renyi\"\n\
    n = 4\n\
    \n\
    [gmm]\n\
    particle_count = 12\n\
    swarm_iterations = 30\n\
    \n\
    [penalty]\n\
    grid_l1 = [0.0, 0.05]\n\
    grid_l1_adaptive = [0.05]\n\
    grid_l2 = [0.0]\n";

#[test]
fn campaign_produces_report_cells_and_records() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("camp.toml");
    fs::write(&cfg, CAMPAIGN_MINI).unwrap();
    let out_dir = dir.path().join("out");
    assert_ok(&run(&[
        "campaign",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]));

    let report = read_json(&out_dir.join("report.json"));
    assert_matches_schema(&report, "campaign-report.schema.json");
    assert_eq!(report["label"], "mini");
    assert_eq!(report["records"].as_array().unwrap().len(), 2);

    let cells = fs::read_to_string(out_dir.join("cells.csv")).unwrap();
    assert!(cells.starts_with("label,t,"));

    let records = fs::read_to_string(out_dir.join("records.ldjson")).unwrap();
    assert!(records.lines().count() >= 3, "digest header plus two records");

    let manifest = read_json(&out_dir.join("manifest.json"));
    let outputs: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["records.ldjson", "report.json", "cells.csv"]);
}

#[test]
fn thread_count_never_changes_output_bytes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("camp.toml");
    fs::write(&cfg, CAMPAIGN_MINI).unwrap();
    let one = dir.path().join("one");
    let eight = dir.path().join("eight");
    for (out_dir, threads) in [(&one, "1"), (&eight, "8")] {
        assert_ok(&run(&[
            "campaign",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--threads",
            threads,
        ]));
    }
    for name in ["report.json", "cells.csv", "records.ldjson"] {
        assert_eq!(
            fs::read(one.join(name)).unwrap(),
            fs::read(eight.join(name)).unwrap(),
            "{name} depends on the thread count"
        );
    }
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, SIM_MINIMAL).unwrap();
    let base = dir.path().join("base");
    let reseeded = dir.path().join("reseeded");
    assert_ok(&run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--out-dir",
        base.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--out-dir",
        reseeded.to_str().unwrap(),
        "--seed",
        "99",
    ]));
    assert_ne!(
        fs::read(base.join("panel.csv")).unwrap(),
        fs::read(reseeded.join("panel.csv")).unwrap()
    );
    assert_eq!(read_json(&reseeded.join("manifest.json"))["seed"], 99);
}
