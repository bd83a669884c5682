//! End-to-end runs of the `coptact` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coptact::io::{self, LatentManifest};
use coptact::kinematics::KinematicChain;
use coptact::probe::{linear_latent_set, LatentSpec};
use coptact::sensor_model::TaxelReading;
use tempfile::TempDir;

fn coptact(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coptact"))
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .env_remove("COPTACT_SEED")
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn lines(path: PathBuf) -> Vec<String> {
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(String::from)
        .collect()
}

fn column(rows: &[String], name: &str) -> Vec<f64> {
    let header: Vec<&str> = rows[0].split(',').collect();
    let j = header.iter().position(|h| *h == name).unwrap();
    rows[1..].iter().map(|r| r.split(',').nth(j).unwrap().parse().unwrap()).collect()
}

fn small_synth(out: &Path) {
    let o = coptact(&["synth", "--set", "synth.count=60"], out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_reference_config_writes_every_contact() {
    let dir = TempDir::new().unwrap();
    let o = coptact(&["synth", "-c", "configs/reference.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(dir.path().join("dataset.csv")).len(), 2401);
    assert!(dir.path().join("layout.json").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn synth_with_zero_count_writes_only_a_header() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&coptact(&["synth", "--set", "synth.count=0"], dir.path())), 0);
    let rows = lines(dir.path().join("dataset.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("t,q0"));
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, "{\"synth\": {\"count\": 10,}").unwrap();
    let out = dir.path().join("out");
    let o = coptact(&["synth", "-c", config.to_str().unwrap()], &out);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&coptact(&["synth", "--set", "synth.cuont=10"], dir.path())), 2);
}

#[test]
fn single_calibration_step_records_one_loss() {
    let dir = TempDir::new().unwrap();
    small_synth(dir.path());
    let o = coptact(&["calibrate", "--set", "calibrate.optimizer.steps=1"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(dir.path().join("loss_history.csv")).len(), 2);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn calibration_without_contacts_exits_3() {
    let dir = TempDir::new().unwrap();
    small_synth(dir.path());
    let layout = io::read_layout(&dir.path().join("layout.json")).unwrap();
    let path = dir.path().join("dataset.csv");
    let mut data = io::read_dataset(&path, layout.len()).unwrap();
    for s in &mut data.samples {
        s.reading = TaxelReading::zeros(layout.len(), s.reading.timestamp);
    }
    let dof = data.samples[0].q.len();
    io::write_dataset(&path, &data, dof, layout.len()).unwrap();
    assert_eq!(code(&coptact(&["calibrate"], dir.path())), 3);
}

#[test]
fn map_rejects_a_missing_column() {
    let dir = TempDir::new().unwrap();
    small_synth(dir.path());
    let input = dir.path().join("cops.csv");
    std::fs::write(&input, "t,fx,fy,fz,px,py,active_count,valid\n0,0,0,1,0,0,1,1\n").unwrap();
    let o = coptact(
        &["map", "--set", "map.direction=\"to_taxels\"", "--set", &format!("map.input={:?}", input.to_str().unwrap())],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pz"));
}

#[test]
fn map_marks_empty_readings_invalid() {
    let dir = TempDir::new().unwrap();
    small_synth(dir.path());
    let layout = io::read_layout(&dir.path().join("layout.json")).unwrap();
    let input = dir.path().join("readings.csv");
    let readings: Vec<TaxelReading> = (0..3).map(|i| TaxelReading::zeros(layout.len(), i as f64)).collect();
    io::write_readings(&input, &readings, layout.len()).unwrap();
    let o = coptact(&["map", "--set", &format!("map.input={:?}", input.to_str().unwrap())], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(dir.path().join("cop.csv"));
    assert_eq!(rows.len(), 4);
    assert!(column(&rows, "valid").iter().all(|&v| v == 0.0));
}

#[test]
fn sysid_history_has_one_row_per_evaluation() {
    let dir = TempDir::new().unwrap();
    let o = coptact(&["sysid", "--set", "sysid.search.budget=10", "--set", "sysid.baseline_samples=0"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(dir.path().join("history.csv")).len(), 11);
    assert!(dir.path().join("best_params.json").exists());
}

#[test]
fn sysid_rejects_negative_stiffness_bounds() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&coptact(&["sysid", "--set", "sysid.bounds.lower.stiffness=-1.0"], dir.path())), 2);
}

#[test]
fn sysid_with_only_unstable_candidates_exits_4() {
    let dir = TempDir::new().unwrap();
    let stiff = r#"{"stiffness": 1e4, "damping": 0.0, "coulomb_friction": 0.0, "viscous_friction": 0.0, "inertia": 1e-4}"#;
    let config = dir.path().join("unstable.json");
    std::fs::write(
        &config,
        format!(r#"{{"sysid": {{"bounds": {{"lower": {stiff}, "upper": {stiff}}}, "search": {{"budget": 10}}}}}}"#),
    )
    .unwrap();
    let o = coptact(&["sysid", "-c", config.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn probe_recovers_exactly_linear_targets() {
    let dir = TempDir::new().unwrap();
    let o = coptact(
        &[
            "probe",
            "--set",
            "probe.generator=\"linear\"",
            "--set",
            r#"probe.latents={"trajectories": 12, "steps": 20, "latent_dim": 8, "target_dim": 3}"#,
            "--set",
            "probe.ridge=0.0",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = io::read_json(&dir.path().join("probe_report.json")).unwrap();
    for r2 in report["r2"].as_array().unwrap() {
        assert!((r2.as_f64().unwrap() - 1.0).abs() < 1e-9, "{r2}");
    }
}

#[test]
fn probe_clusters_separate_by_the_last_step() {
    let dir = TempDir::new().unwrap();
    let o = coptact(&["probe"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(dir.path().join("sc_over_time.csv"));
    for name in ["sc_pca", "sc_full"] {
        let last = *column(&rows, name).last().unwrap();
        assert!(last > 0.8, "{name} {last}");
    }
}

#[test]
fn probe_rejects_a_manifest_with_the_wrong_width() {
    let dir = TempDir::new().unwrap();
    let spec = LatentSpec { trajectories: 4, steps: 5, latent_dim: 6, target_dim: 2, ..LatentSpec::default() };
    io::write_latent_set(dir.path(), &linear_latent_set(&spec, 0.0).0).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: LatentManifest = io::read_json(&path).unwrap();
    manifest.latent_dim = 7;
    io::write_json(&path, &manifest).unwrap();
    let o = coptact(&["probe", "--set", &format!("probe.manifest={:?}", path.to_str().unwrap())], &dir.path().join("out"));
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_variable_overrides_the_config() {
    let run = |env: Option<&str>, set: &str| {
        let dir = TempDir::new().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_coptact"));
        cmd.env_remove("COPTACT_SEED");
        if let Some(v) = env {
            cmd.env("COPTACT_SEED", v);
        }
        let o = cmd.args(["synth", "--set", "synth.count=20", "--set", set, "--out"]).arg(dir.path()).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        lines(dir.path().join("dataset.csv"))
    };
    assert_eq!(run(Some("11"), "seed=4"), run(None, "seed=11"));
    assert_ne!(run(None, "seed=4"), run(None, "seed=11"));
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_coptact"))
        .env("COPTACT_SEED", "eleven")
        .args(["synth", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn fixture_chain_is_the_reference_finger() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/reference_finger.json");
    let chain: KinematicChain = io::read_json(&path).unwrap();
    assert_eq!(chain, KinematicChain::reference_finger());
}
