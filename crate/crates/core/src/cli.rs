//! Batch front end: one strict config file per run, five subcommands,
//! file-based inputs and outputs.
//!
//! Exit codes: 0 success, 1 output failure, 2 config or schema error,
//! 3 degenerate calibration data, 4 every sysid evaluation diverged.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::{calibrate, median, CalibConfig, CalibError};
use crate::geometry::Rotation;
use crate::io::{self, fmt_f64, CopRow, IoError};
use crate::kinematics::KinematicChain;
use crate::probe::{
    linear_latent_set, linear_probe_fit, pca_project, probe_score, ramped_cluster_set, temporal_cluster_report,
    LatentSpec, LatentTrajectorySet, ProbeError, TimeSilhouette,
};
use crate::sensor_model::{cop_to_taxels, taxels_to_cop, SensorError, TaxelReading};
use crate::synthetic::{
    build_benchmark, BenchmarkSpec, CapLayoutSpec, ContactSpec, NoiseSpec, TorqueReference, REFERENCE_Q,
};
use crate::sysid::{
    bayes_opt_identify, random_search, simulate_actuator, trajectory_mse, ActuatorParams, ParamBounds, ProbeSequence,
    SysidConfig, SysidError,
};

pub const SEED_ENV: &str = "COPTACT_SEED";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// A missing or malformed input is a schema error; failing to write is an I/O failure.
fn input(e: IoError) -> CliError {
    CliError::config(e.to_string())
}

fn output(e: IoError) -> CliError {
    CliError {
        code: 1,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every section seed when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub verbosity: Verbosity,
    pub synth: SynthSection,
    pub calibrate: CalibrateSection,
    pub map: MapSection,
    pub sysid: SysidSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            output_dir: PathBuf::from("out"),
            verbosity: Verbosity::Normal,
            synth: SynthSection::default(),
            calibrate: CalibrateSection::default(),
            map: MapSection::default(),
            sysid: SysidSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub cap: CapLayoutSpec,
    pub contacts: ContactSpec,
    pub count: usize,
    /// Largest angle (rad) between a true taxel frame and its nominal frame.
    pub max_perturbation: f64,
    pub noise: NoiseSpec,
    pub torque_reference: TorqueReference,
    pub seed: u64,
    /// Chain file; the reference finger when unset.
    pub chain: Option<PathBuf>,
    /// Joint configuration held during contact; the reference pose when unset.
    pub q: Option<Vec<f64>>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let b = BenchmarkSpec::default();
        SynthSection {
            cap: b.cap,
            contacts: b.contacts,
            count: b.count,
            max_perturbation: b.max_perturbation,
            noise: b.noise,
            torque_reference: b.torque_reference,
            seed: b.seed,
            chain: None,
            q: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    /// Defaults to `<output_dir>/layout.json`.
    pub layout: Option<PathBuf>,
    /// Defaults to `<output_dir>/dataset.csv`.
    pub dataset: Option<PathBuf>,
    /// Synthesis manifest with the chain and ground truth; `<output_dir>/manifest.json` is used when present.
    pub manifest: Option<PathBuf>,
    /// Chain file, taking precedence over the manifest's chain.
    pub chain: Option<PathBuf>,
    pub optimizer: CalibConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapDirection {
    #[default]
    ToCop,
    ToTaxels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// Defaults to `<output_dir>/layout.json`.
    pub layout: Option<PathBuf>,
    pub direction: MapDirection,
    /// Reading CSV for `to_cop`, CoP CSV for `to_taxels`.
    pub input: Option<PathBuf>,
    /// Output file name inside the output directory.
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidSection {
    /// Hidden parameters of the simulated plant that produces the references.
    pub plant: ActuatorParams,
    /// Measured reference CSVs, one per probe, replacing the simulated plant.
    pub references: Option<Vec<PathBuf>>,
    /// Gaussian noise (rad) added to simulated references.
    pub measurement_noise: f64,
    pub probes: Vec<ProbeSequence>,
    pub bounds: ParamBounds,
    pub search: SysidConfig,
    /// Uniform samples scored for the random-search baseline; 0 skips it.
    pub baseline_samples: usize,
}

impl Default for SysidSection {
    fn default() -> Self {
        SysidSection {
            plant: ActuatorParams {
                stiffness: 2.6,
                damping: 0.02,
                coulomb_friction: 0.006,
                viscous_friction: 0.003,
                inertia: 1.5e-4,
            },
            references: None,
            measurement_noise: 0.0,
            probes: ProbeSequence::standard_suite(),
            bounds: ParamBounds::default(),
            search: SysidConfig::default(),
            baseline_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentGenerator {
    /// Targets exactly linear in Gaussian latents (plus `target_noise`).
    Linear,
    /// Clusters whose separation grows with time.
    #[default]
    Clusters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Latent trajectory manifest; synthetic latents are generated when unset.
    pub manifest: Option<PathBuf>,
    pub generator: LatentGenerator,
    pub latents: LatentSpec,
    pub target_noise: f64,
    /// Training trajectories, taken first; all but the test split when unset.
    pub train: Option<usize>,
    /// Test trajectories following the training ones; one in eleven when unset.
    pub test: Option<usize>,
    pub ridge: f64,
    pub components: usize,
    /// Time indices for the cluster report; every step when unset.
    pub times: Option<Vec<usize>>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            manifest: None,
            generator: LatentGenerator::Clusters,
            latents: LatentSpec::default(),
            target_noise: 0.0,
            train: None,
            test: None,
            ridge: 1e-6,
            components: 2,
            times: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Toml,
}

impl Format {
    fn of(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("toml") => Format::Toml,
            _ => Format::Json,
        }
    }
}

impl RunConfig {
    /// Parses a config file, applying `key=value` overrides (dotted keys,
    /// values in JSON syntax or bare strings).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (text, format, name) = match path {
            Some(p) => (
                io::read_text(p).map_err(input)?,
                Format::of(p),
                p.display().to_string(),
            ),
            None => ("{}".to_string(), Format::Json, "<defaults>".to_string()),
        };
        let diag = |e: &dyn std::fmt::Display| CliError::config(format!("{name}: {e}"));
        if overrides.is_empty() {
            return match format {
                Format::Json => serde_json::from_str(&text).map_err(|e| diag(&e)),
                Format::Toml => toml::from_str(&text).map_err(|e| diag(&e)),
            };
        }
        let mut value: Value = match format {
            Format::Json => serde_json::from_str(&text).map_err(|e| diag(&e))?,
            Format::Toml => toml::from_str(&text).map_err(|e| diag(&e))?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| diag(&e))
    }

    /// Config seed, replaced by `COPTACT_SEED` when that is set.
    pub fn resolve_seed(&mut self, env: Option<&str>) -> Result<(), CliError> {
        if let Some(s) = env {
            let seed = s
                .trim()
                .parse::<u64>()
                .map_err(|_| CliError::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.calibrate.optimizer.seed = seed;
            self.sysid.search.seed = seed;
            self.probe.latents.seed = seed;
        }
        Ok(())
    }

    fn say(&self, line: impl AsRef<str>) {
        if self.verbosity != Verbosity::Quiet {
            println!("{}", line.as_ref());
        }
    }

    fn detail(&self, line: impl AsRef<str>) {
        if self.verbosity == Verbosity::Verbose {
            println!("{}", line.as_ref());
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!("--set: empty path segment in {key:?}")));
        }
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap()
            }
            _ => return Err(CliError::config(format!("--set: {key:?} descends into a non-table value"))),
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn read_chain(path: &Path) -> Result<KinematicChain, CliError> {
    io::read_json(path).map_err(input)
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Written next to a synthetic dataset: how it was made and what the true
/// taxel frames are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    /// Seconds since the Unix epoch; the only field that differs between reruns.
    pub created_unix: u64,
    pub version: String,
    pub seed: u64,
    pub spec: BenchmarkSpec,
    pub chain: KinematicChain,
    pub q: Vec<f64>,
    pub ground_truth_rotations: Vec<Rotation>,
    pub samples: usize,
    pub layout_file: String,
    pub dataset_file: String,
}

/// Generates a cap layout and a torque-matching dataset: writes
/// `layout.json` (nominal frames), `dataset.csv` and `manifest.json`.
pub fn cmd_synth(config: &RunConfig) -> Result<(), CliError> {
    let s = &config.synth;
    let chain = match &s.chain {
        Some(p) => read_chain(p)?,
        None => KinematicChain::reference_finger(),
    };
    let q = s.q.clone().unwrap_or_else(|| REFERENCE_Q.to_vec());
    let spec = BenchmarkSpec {
        cap: s.cap,
        contacts: s.contacts,
        count: s.count,
        max_perturbation: s.max_perturbation,
        noise: s.noise,
        torque_reference: s.torque_reference,
        seed: s.seed,
    };
    let bench = build_benchmark(&spec, &chain, &q).map_err(|e| CliError::config(format!("synth: {e}")))?;
    let layout = &bench.cap.layout;
    io::write_layout(&config.out("layout.json"), layout).map_err(output)?;
    io::write_dataset(&config.out("dataset.csv"), &bench.data.dataset, chain.dof(), layout.len()).map_err(output)?;
    let manifest = SynthManifest {
        created_unix: timestamp(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: s.seed,
        spec,
        chain,
        q,
        ground_truth_rotations: bench.true_rotations.clone(),
        samples: bench.data.dataset.len(),
        layout_file: "layout.json".into(),
        dataset_file: "dataset.csv".into(),
    };
    io::write_json(&config.out("manifest.json"), &manifest).map_err(output)?;
    config.say(format!(
        "synth: {} taxels, {} samples -> {}",
        layout.len(),
        manifest.samples,
        config.output_dir.display()
    ));
    Ok(())
}

/// Fits the taxel frame rotations: writes `report.json` and `loss_history.csv`.
pub fn cmd_calibrate(config: &RunConfig) -> Result<(), CliError> {
    let c = &config.calibrate;
    let layout_path = c.layout.clone().unwrap_or_else(|| config.out("layout.json"));
    let dataset_path = c.dataset.clone().unwrap_or_else(|| config.out("dataset.csv"));
    let manifest_path = c.manifest.clone().or_else(|| {
        let p = config.out("manifest.json");
        p.exists().then_some(p)
    });
    let layout = io::read_layout(&layout_path).map_err(input)?;
    let dataset = io::read_dataset(&dataset_path, layout.len()).map_err(input)?;
    let manifest: Option<SynthManifest> = manifest_path
        .as_deref()
        .map(io::read_json)
        .transpose()
        .map_err(input)?;
    let chain = match (&c.chain, &manifest) {
        (Some(p), _) => read_chain(p)?,
        (None, Some(m)) => m.chain.clone(),
        (None, None) => KinematicChain::reference_finger(),
    };
    let truth = manifest.as_ref().map(|m| m.ground_truth_rotations.as_slice());
    if let Some(t) = truth {
        if t.len() != layout.len() {
            return Err(CliError::config(format!(
                "manifest lists {} ground-truth rotations for {} taxels",
                t.len(),
                layout.len()
            )));
        }
    }
    let report = calibrate(&dataset, &layout, &chain, &c.optimizer, truth).map_err(|e| match e {
        CalibError::AllSamplesSkipped | CalibError::EmptyDataset => CliError {
            code: 3,
            message: format!("calibrate: {e}"),
        },
        e => CliError::config(format!("calibrate: {e}")),
    })?;
    io::write_json(&config.out("report.json"), &report).map_err(output)?;
    let mut history = String::from("step,loss\n");
    for (k, l) in report.loss_history.iter().enumerate() {
        history.push_str(&format!("{k},{}\n", fmt_f64(*l)));
    }
    io::write_text(&config.out("loss_history.csv"), &history).map_err(output)?;
    for (k, l) in report.loss_history.iter().enumerate() {
        config.detail(format!("step {k}: loss {l:.6e}"));
    }
    config.say(format!(
        "calibrate: final loss {:.6e} (initial {:.6e}, {} of {} samples skipped)",
        report.final_loss,
        report.loss_history[0],
        report.skipped_count,
        dataset.len()
    ));
    if let (Some(before), Some(after)) = (report.median_initial_geodesic_error(), report.median_geodesic_error()) {
        config.say(format!(
            "calibrate: median geodesic error {:.3}° (initial {:.3}°)",
            after.to_degrees(),
            before.to_degrees()
        ));
    }
    Ok(())
}

/// Converts between taxel readings and CoP contacts.
pub fn cmd_map(config: &RunConfig) -> Result<(), CliError> {
    let m = &config.map;
    let layout_path = m.layout.clone().unwrap_or_else(|| config.out("layout.json"));
    let input_path = m
        .input
        .as_ref()
        .ok_or_else(|| CliError::config("map.input is required"))?;
    let layout = io::read_layout(&layout_path).map_err(input)?;
    let schema = |e: SensorError| CliError::config(format!("map: {e}"));
    match m.direction {
        MapDirection::ToCop => {
            let readings = io::read_readings(input_path, layout.len()).map_err(input)?;
            let rows = readings
                .iter()
                .map(|r| match taxels_to_cop(r, &layout) {
                    Ok(c) => Ok(CopRow {
                        t: r.timestamp,
                        contact: Some(c),
                    }),
                    Err(SensorError::NoContact) => Ok(CopRow {
                        t: r.timestamp,
                        contact: None,
                    }),
                    Err(e) => Err(schema(e)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let name = m.output.clone().unwrap_or_else(|| "cop.csv".into());
            io::write_cops(&config.out(&name), &rows).map_err(output)?;
            let valid = rows.iter().filter(|r| r.contact.is_some()).count();
            config.say(format!("map: {valid} of {} rows in contact -> {name}", rows.len()));
        }
        MapDirection::ToTaxels => {
            let rows = io::read_cops(input_path).map_err(input)?;
            let readings = rows
                .iter()
                .map(|row| match &row.contact {
                    Some(c) => cop_to_taxels(c, &layout).map(|r| TaxelReading {
                        timestamp: row.t,
                        ..r
                    }),
                    None => Ok(TaxelReading::zeros(layout.len(), row.t)),
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(schema)?;
            let name = m.output.clone().unwrap_or_else(|| "readings.csv".into());
            io::write_readings(&config.out(&name), &readings, layout.len()).map_err(output)?;
            config.say(format!("map: {} readings -> {name}", readings.len()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysidReport {
    pub best: ActuatorParams,
    pub best_mse: f64,
    /// Trajectory MSE of the best parameters, per probe, in probe order.
    pub probe_mse: Vec<ProbeMse>,
    pub evaluations: usize,
    pub unstable_evaluations: usize,
    /// Hidden plant parameters when the references were simulated.
    pub plant: Option<ActuatorParams>,
    /// Median loss of the uniform random baseline.
    pub random_median_mse: Option<f64>,
    /// `best_mse / random_median_mse`.
    pub baseline_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMse {
    pub probe: String,
    pub mse: f64,
}

fn probe_file_names(probes: &[ProbeSequence]) -> Vec<String> {
    probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let duplicate = probes.iter().filter(|q| q.kind == p.kind).count() > 1;
            if duplicate {
                format!("{}_{i}", p.kind.name())
            } else {
                p.kind.name().to_string()
            }
        })
        .collect()
}

/// Identifies actuator parameters by Bayesian optimization: writes
/// `best_params.json`, `history.csv` and one `trajectory_<probe>.csv` per probe.
pub fn cmd_sysid(config: &RunConfig) -> Result<(), CliError> {
    let s = &config.sysid;
    let bad = |e: SysidError| CliError::config(format!("sysid: {e}"));
    s.bounds.validate().map_err(bad)?;
    s.search.validate(s.probes.len()).map_err(bad)?;
    if s.probes.is_empty() {
        return Err(CliError::config("sysid: at least one probe is required"));
    }
    for p in &s.probes {
        p.validate().map_err(bad)?;
    }
    if !(s.measurement_noise >= 0.0) {
        return Err(CliError::config("sysid: measurement_noise must be non-negative"));
    }
    let (references, plant) = match &s.references {
        Some(paths) => {
            if paths.len() != s.probes.len() {
                return Err(CliError::config(format!(
                    "sysid: {} reference files for {} probes",
                    paths.len(),
                    s.probes.len()
                )));
            }
            let refs = paths
                .iter()
                .map(|p| io::read_trajectory(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(input)?;
            (refs, None)
        }
        None => {
            s.plant.validate().map_err(bad)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.search.seed ^ 0x5EED_0F_A11_u64);
            let gauss = Normal::new(0.0, 1.0).unwrap();
            let mut refs = Vec::with_capacity(s.probes.len());
            for p in &s.probes {
                let mut t = simulate_actuator(&s.plant, p, s.search.dt).map_err(bad)?;
                if s.measurement_noise > 0.0 {
                    t.measured
                        .iter_mut()
                        .for_each(|q| *q += s.measurement_noise * gauss.sample(&mut rng));
                }
                refs.push(t);
            }
            (refs, Some(s.plant))
        }
    };
    let result = bayes_opt_identify(&references, &s.probes, &s.bounds, &s.search).map_err(|e| match e {
        SysidError::AllUnstable => CliError {
            code: 4,
            message: format!("sysid: {e}"),
        },
        e => bad(e),
    })?;
    let random_median_mse = if s.baseline_samples > 0 {
        let baseline = random_search(
            &references,
            &s.probes,
            &s.bounds,
            s.baseline_samples,
            s.search.seed.wrapping_add(1),
        );
        match baseline {
            Ok(b) => Some(median(&b.history.iter().map(|e| e.mse).collect::<Vec<_>>())),
            Err(SysidError::AllUnstable) => None,
            Err(e) => return Err(bad(e)),
        }
    } else {
        None
    };
    let names = probe_file_names(&s.probes);
    let mut simulated = Vec::with_capacity(s.probes.len());
    let mut probe_mse = Vec::with_capacity(s.probes.len());
    for ((p, r), name) in s.probes.iter().zip(&references).zip(&names) {
        let sim = simulate_actuator(&result.best, p, s.search.dt).map_err(bad)?;
        probe_mse.push(ProbeMse {
            probe: name.clone(),
            mse: trajectory_mse(&sim, r).map_err(bad)?,
        });
        simulated.push(sim);
    }
    let report = SysidReport {
        best: result.best,
        best_mse: result.best_mse,
        probe_mse,
        evaluations: result.history.len(),
        unstable_evaluations: result.history.iter().filter(|e| e.unstable).count(),
        plant,
        random_median_mse,
        baseline_ratio: random_median_mse.map(|m| result.best_mse / m),
    };
    io::write_json(&config.out("best_params.json"), &report).map_err(output)?;
    let mut history = String::from("evaluation,");
    history.push_str(&ActuatorParams::NAMES.join(","));
    history.push_str(",mse,unstable,best_so_far\n");
    for (k, e) in result.history.iter().enumerate() {
        let values: Vec<String> = e.params.to_array().iter().map(|v| fmt_f64(*v)).collect();
        history.push_str(&format!(
            "{k},{},{},{},{}\n",
            values.join(","),
            fmt_f64(e.mse),
            u8::from(e.unstable),
            fmt_f64(e.best_so_far)
        ));
    }
    io::write_text(&config.out("history.csv"), &history).map_err(output)?;
    for ((r, sim), name) in references.iter().zip(&simulated).zip(&names) {
        io::write_trajectory(&config.out(&format!("trajectory_{name}.csv")), r, Some(sim)).map_err(output)?;
    }
    config.say(format!(
        "sysid: best mse {:.6e} after {} evaluations{}",
        report.best_mse,
        report.evaluations,
        report
            .baseline_ratio
            .map(|r| format!(" ({:.4} of the random-search median)", r))
            .unwrap_or_default()
    ));
    for p in &report.probe_mse {
        config.detail(format!("sysid: {} mse {:.6e}", p.probe, p.mse));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub targets: Vec<String>,
    pub rmse: Vec<f64>,
    /// `null` where the test target is constant and r² is undefined.
    pub r2: Vec<Option<f64>>,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub ridge: f64,
    pub components: usize,
    /// `sc_pca` is measured on the first `components` principal-component
    /// scores, `sc_full` on the full latent vectors.
    pub sc_over_time: Vec<TimeSilhouette>,
}

fn probe_err(e: ProbeError) -> CliError {
    CliError::config(format!("probe: {e}"))
}

/// Linear probe and cluster analysis of latent trajectories: writes
/// `probe_report.json`, `pca_scores.csv` and `sc_over_time.csv`.
pub fn cmd_probe(config: &RunConfig) -> Result<(), CliError> {
    let p = &config.probe;
    let set = match &p.manifest {
        Some(path) => io::read_latent_set(path).map_err(input)?,
        None => match p.generator {
            LatentGenerator::Linear => linear_latent_set(&p.latents, p.target_noise).0,
            LatentGenerator::Clusters => ramped_cluster_set(&p.latents),
        },
    };
    let n = set.trajectories().len();
    let test = p.test.unwrap_or((n / 11).max(1));
    let train = p.train.unwrap_or(n.saturating_sub(test));
    if train == 0 || test == 0 || train + test > n {
        return Err(CliError::config(format!(
            "probe: split of {train} train and {test} test trajectories needs 1 <= each and at most {n} in total"
        )));
    }
    let subset = |range: std::ops::Range<usize>| {
        LatentTrajectorySet::new(set.trajectories()[range].to_vec()).map_err(probe_err)
    };
    let weights = linear_probe_fit(&subset(0..train)?, p.ridge).map_err(probe_err)?;
    let score = probe_score(&weights, &subset(train..train + test)?).map_err(probe_err)?;

    let steps = set.trajectories().iter().map(|t| t.latents.nrows()).min().unwrap_or(0);
    let times = p.times.clone().unwrap_or_else(|| (0..steps).collect());
    let sc = temporal_cluster_report(&set, &times, p.components).map_err(probe_err)?;

    let labels = set.labels();
    let mut scores = String::from("time,trajectory,label");
    for c in 0..p.components {
        scores.push_str(&format!(",pc_{c}"));
    }
    scores.push('\n');
    for &t in &times {
        let pca = pca_project(&set.at_time(t).map_err(probe_err)?, p.components).map_err(probe_err)?;
        for (i, row) in pca.scores.row_iter().enumerate() {
            let values: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            scores.push_str(&format!("{t},{i},{},{}\n", labels[i], values.join(",")));
        }
    }
    let mut sc_csv = String::from("time,sc_pca,sc_full\n");
    for s in &sc {
        sc_csv.push_str(&format!("{},{},{}\n", s.time, fmt_f64(s.sc_pca), fmt_f64(s.sc_full)));
    }
    let report = ProbeReport {
        targets: (0..set.target_dim()).map(|k| format!("target_{k}")).collect(),
        rmse: score.rmse,
        r2: score.r2,
        train_trajectories: train,
        test_trajectories: test,
        ridge: p.ridge,
        components: p.components,
        sc_over_time: sc,
    };
    io::write_json(&config.out("probe_report.json"), &report).map_err(output)?;
    io::write_text(&config.out("pca_scores.csv"), &scores).map_err(output)?;
    io::write_text(&config.out("sc_over_time.csv"), &sc_csv).map_err(output)?;
    let r2: Vec<String> = report
        .r2
        .iter()
        .map(|r| r.map_or("undefined".into(), |v| format!("{v:.4}")))
        .collect();
    config.say(format!("probe: r² [{}]", r2.join(", ")));
    if let Some(last) = report.sc_over_time.last() {
        config.say(format!(
            "probe: silhouette at t = {}: {:.4} (PCA), {:.4} (full)",
            last.time, last.sc_pca, last.sc_full
        ));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "coptact", version, about = "Tactile CoP mapping, taxel calibration, actuator identification and latent probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum CommandKind {
    Synth,
    Calibrate,
    Map,
    Sysid,
    Probe,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a cap layout and a synthetic calibration dataset.
    Synth(RunArgs),
    /// Fit taxel frame rotations to joint torques.
    Calibrate(RunArgs),
    /// Convert between taxel readings and CoP contacts.
    Map(RunArgs),
    /// Identify actuator parameters by Bayesian optimization.
    Sysid(RunArgs),
    /// Linear probes and silhouette scores of latent trajectories.
    Probe(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON or TOML run config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set synth.count=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory, overriding `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Parses arguments, runs one subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (kind, args) = match cli.command {
        Command::Synth(a) => (CommandKind::Synth, a),
        Command::Calibrate(a) => (CommandKind::Calibrate, a),
        Command::Map(a) => (CommandKind::Map, a),
        Command::Sysid(a) => (CommandKind::Sysid, a),
        Command::Probe(a) => (CommandKind::Probe, a),
    };
    match execute(kind, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn execute(kind: CommandKind, args: &RunArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(args.config.as_deref(), &args.set)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.resolve_seed(std::env::var(SEED_ENV).ok().as_deref())?;
    if args.threads == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    pool.install(|| match kind {
        CommandKind::Synth => cmd_synth(&config),
        CommandKind::Calibrate => cmd_calibrate(&config),
        CommandKind::Map => cmd_map(&config),
        CommandKind::Sysid => cmd_sysid(&config),
        CommandKind::Probe => cmd_probe(&config),
    })
}
