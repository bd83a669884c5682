//! File formats: layout and chain JSON, reading/dataset/CoP/trajectory CSV.
//!
//! CSV floats are written with 17 significant digits so every value reads
//! back bit-for-bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibDataset, CalibSample};
use crate::geometry::Rotation;
use crate::probe::{LatentTrajectory, LatentTrajectorySet, ProbeError};
use crate::sensor_model::{CopContact, MappingParams, SensorError, TaxelLayout, TaxelReading};
use crate::sysid::Trajectory;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// 17 significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(file_err(path))?;
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(file_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_text(path, &text)
}

/// On-disk taxel layout. `normals` is optional: when absent the surface
/// normals are the `normal_axis` columns of the orientations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub n_taxels: usize,
    pub positions: Vec<[f64; 3]>,
    pub orientations: Vec<Rotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<[f64; 3]>>,
    pub normal_axis: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub normal_only: bool,
    #[serde(default)]
    pub solve_over_all_taxels: bool,
}

impl LayoutFile {
    pub fn from_layout(layout: &TaxelLayout) -> Self {
        let p = layout.params();
        LayoutFile {
            n_taxels: layout.len(),
            positions: layout.positions().iter().map(|v| [v.x, v.y, v.z]).collect(),
            orientations: layout.orientations().to_vec(),
            normals: Some(layout.normals().iter().map(|v| [v.x, v.y, v.z]).collect()),
            normal_axis: layout.normal_axis(),
            epsilon: p.epsilon,
            sigma: p.sigma,
            lambda: p.lambda,
            normal_only: p.normal_only,
            solve_over_all_taxels: p.solve_over_all_taxels,
        }
    }

    pub fn to_layout(&self) -> Result<TaxelLayout, SensorError> {
        if self.positions.len() != self.n_taxels {
            return Err(SensorError::InvalidLayout(format!(
                "n_taxels is {} but {} positions are listed",
                self.n_taxels,
                self.positions.len()
            )));
        }
        let positions = self.positions.iter().map(|p| Vector3::from(*p)).collect();
        let params = MappingParams {
            epsilon: self.epsilon,
            sigma: self.sigma,
            lambda: self.lambda,
            normal_only: self.normal_only,
            solve_over_all_taxels: self.solve_over_all_taxels,
        };
        match &self.normals {
            Some(n) => TaxelLayout::with_normals(
                positions,
                self.orientations.clone(),
                n.iter().map(|v| Vector3::from(*v)).collect(),
                self.normal_axis,
                params,
            ),
            None => TaxelLayout::new(positions, self.orientations.clone(), self.normal_axis, params),
        }
    }
}

pub fn read_layout(path: &Path) -> Result<TaxelLayout, IoError> {
    let file: LayoutFile = read_json(path)?;
    file.to_layout().map_err(|e| schema(path, e.to_string()))
}

pub fn write_layout(path: &Path, layout: &TaxelLayout) -> Result<(), IoError> {
    write_json(path, &LayoutFile::from_layout(layout))
}

fn force_columns(n: usize) -> Vec<String> {
    (0..n)
        .flat_map(|i| ["fx", "fy", "fz"].map(|c| format!("{c}_{i}")))
        .collect()
}

pub fn reading_header(n_taxels: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(force_columns(n_taxels));
    h
}

pub fn dataset_header(dof: usize, n_taxels: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..dof).map(|i| format!("q{i}")));
    h.extend((0..dof).map(|i| format!("tau{i}")));
    h.extend(force_columns(n_taxels));
    h
}

pub const COP_HEADER: [&str; 9] = ["t", "fx", "fy", "fz", "px", "py", "pz", "active_count", "valid"];

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Table { header, rows: Vec::new() }
    }

    fn write(&self, path: &Path) -> Result<(), IoError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| parse_err(path, e);
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| parse_err(path, e))?;
        write_text(path, std::str::from_utf8(&bytes).expect("csv output is utf-8"))
    }
}

/// Header plus numeric rows of a CSV file.
struct NumericCsv {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_numeric_csv(path: &Path) -> Result<NumericCsv, IoError> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f64>()
                    .map_err(|_| schema(path, format!("row {}: column {}: not a number: {v:?}", line + 1, header[c])))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(NumericCsv { header, rows })
}

fn expect_header(path: &Path, got: &[String], expected: &[String]) -> Result<(), IoError> {
    if let Some(missing) = expected.iter().find(|c| !got.contains(c)) {
        return Err(schema(path, format!("missing column {missing:?}")));
    }
    if got != expected {
        return Err(schema(
            path,
            format!("columns must be exactly [{}]", expected.join(", ")),
        ));
    }
    Ok(())
}

fn forces_from(row: &[f64]) -> Vec<Vector3<f64>> {
    row.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn push_forces(row: &mut Vec<String>, forces: &[Vector3<f64>]) {
    for f in forces {
        row.extend([f.x, f.y, f.z].map(fmt_f64));
    }
}

pub fn write_readings(path: &Path, readings: &[TaxelReading], n_taxels: usize) -> Result<(), IoError> {
    let mut table = Table::new(reading_header(n_taxels));
    for r in readings {
        let mut row = vec![fmt_f64(r.timestamp)];
        push_forces(&mut row, &r.forces);
        table.rows.push(row);
    }
    table.write(path)
}

pub fn read_readings(path: &Path, n_taxels: usize) -> Result<Vec<TaxelReading>, IoError> {
    let csv = read_numeric_csv(path)?;
    expect_header(path, &csv.header, &reading_header(n_taxels))?;
    Ok(csv
        .rows
        .iter()
        .map(|row| TaxelReading {
            timestamp: row[0],
            forces: forces_from(&row[1..]),
        })
        .collect())
}

pub fn write_dataset(path: &Path, dataset: &CalibDataset, dof: usize, n_taxels: usize) -> Result<(), IoError> {
    let mut table = Table::new(dataset_header(dof, n_taxels));
    for s in &dataset.samples {
        let mut row = vec![fmt_f64(s.reading.timestamp)];
        row.extend(s.q.iter().chain(&s.tau).map(|v| fmt_f64(*v)));
        push_forces(&mut row, &s.reading.forces);
        table.rows.push(row);
    }
    table.write(path)
}

/// Reads a dataset whose joint count is inferred from the `q` columns.
pub fn read_dataset(path: &Path, n_taxels: usize) -> Result<CalibDataset, IoError> {
    let csv = read_numeric_csv(path)?;
    let dof = csv.header.iter().filter(|h| h.starts_with('q')).count();
    expect_header(path, &csv.header, &dataset_header(dof, n_taxels))?;
    let samples = csv
        .rows
        .iter()
        .map(|row| CalibSample {
            reading: TaxelReading {
                timestamp: row[0],
                forces: forces_from(&row[1 + 2 * dof..]),
            },
            q: row[1..1 + dof].to_vec(),
            tau: row[1 + dof..1 + 2 * dof].to_vec(),
        })
        .collect();
    Ok(CalibDataset { samples })
}

/// One row of a CoP stream; `contact` is `None` for rows with `valid = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopRow {
    pub t: f64,
    pub contact: Option<CopContact>,
}

pub fn write_cops(path: &Path, rows: &[CopRow]) -> Result<(), IoError> {
    let mut table = Table::new(COP_HEADER.iter().map(|s| s.to_string()).collect());
    for r in rows {
        let mut row = vec![fmt_f64(r.t)];
        match &r.contact {
            Some(c) => {
                row.extend([c.force.x, c.force.y, c.force.z, c.position.x, c.position.y, c.position.z].map(fmt_f64));
                row.push(c.active_count.to_string());
                row.push("1".into());
            }
            None => {
                row.extend([0.0; 6].map(fmt_f64));
                row.push("0".into());
                row.push("0".into());
            }
        }
        table.rows.push(row);
    }
    table.write(path)
}

pub fn read_cops(path: &Path) -> Result<Vec<CopRow>, IoError> {
    let csv = read_numeric_csv(path)?;
    let expected: Vec<String> = COP_HEADER.iter().map(|s| s.to_string()).collect();
    expect_header(path, &csv.header, &expected)?;
    csv.rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let valid = row[8];
            if valid != 0.0 && valid != 1.0 {
                return Err(schema(path, format!("row {}: valid must be 0 or 1", i + 1)));
            }
            Ok(CopRow {
                t: row[0],
                contact: (valid == 1.0).then(|| CopContact {
                    force: Vector3::new(row[1], row[2], row[3]),
                    position: Vector3::new(row[4], row[5], row[6]),
                    active_count: row[7] as usize,
                }),
            })
        })
        .collect()
}

/// Trajectory CSV `t, q_target, q_measured`, plus an optional simulated
/// column for plotting the identified model against the measurement.
pub fn write_trajectory(path: &Path, trajectory: &Trajectory, simulated: Option<&Trajectory>) -> Result<(), IoError> {
    let mut header: Vec<String> = ["t", "q_target", "q_measured"].map(String::from).to_vec();
    if simulated.is_some() {
        header.push("q_identified".into());
    }
    let mut table = Table::new(header);
    for k in 0..trajectory.len() {
        let mut row = vec![
            fmt_f64(trajectory.times[k]),
            fmt_f64(trajectory.target[k]),
            fmt_f64(trajectory.measured[k]),
        ];
        if let Some(s) = simulated {
            row.push(fmt_f64(s.measured[k]));
        }
        table.rows.push(row);
    }
    table.write(path)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let csv = read_numeric_csv(path)?;
    let expected: Vec<String> = ["t", "q_target", "q_measured"].map(String::from).to_vec();
    if csv.header.len() < 3 || csv.header[..3] != expected[..] {
        return Err(schema(path, "columns must start with t, q_target, q_measured"));
    }
    let col = |c: usize| csv.rows.iter().map(|r| r[c]).collect::<Vec<f64>>();
    Trajectory::new(col(0), col(1), col(2)).map_err(|e| schema(path, e.to_string()))
}

/// Manifest listing latent trajectory CSV files (paths relative to the
/// manifest) with their cluster labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentManifest {
    pub latent_dim: usize,
    pub target_dim: usize,
    pub trajectories: Vec<LatentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentEntry {
    pub file: String,
    pub label: usize,
}

pub fn latent_header(d: usize, k: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..d).map(|i| format!("latent_{i}")));
    h.extend((0..k).map(|i| format!("target_{i}")));
    h
}

/// Writes one CSV per trajectory plus `manifest.json` into `dir`.
pub fn write_latent_set(dir: &Path, set: &LatentTrajectorySet) -> Result<(), IoError> {
    let (d, k) = (set.latent_dim(), set.target_dim());
    let mut entries = Vec::new();
    for (i, tr) in set.trajectories().iter().enumerate() {
        let file = format!("trajectory_{i:04}.csv");
        let mut table = Table::new(latent_header(d, k));
        for t in 0..tr.latents.nrows() {
            let mut row = vec![t.to_string()];
            row.extend(tr.latents.row(t).iter().chain(tr.targets.row(t).iter()).map(|v| fmt_f64(*v)));
            table.rows.push(row);
        }
        table.write(&dir.join(&file))?;
        entries.push(LatentEntry { file, label: tr.label });
    }
    write_json(
        &dir.join("manifest.json"),
        &LatentManifest {
            latent_dim: d,
            target_dim: k,
            trajectories: entries,
        },
    )
}

pub fn read_latent_set(manifest_path: &Path) -> Result<LatentTrajectorySet, IoError> {
    let manifest: LatentManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let (d, k) = (manifest.latent_dim, manifest.target_dim);
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for e in &manifest.trajectories {
        let path = dir.join(&e.file);
        let csv = read_numeric_csv(&path)?;
        if csv.header.len() != 1 + d + k {
            let got_d = csv.header.iter().filter(|h| h.starts_with("latent_")).count();
            return Err(schema(
                &path,
                format!("expected latent dimension {d} and {k} targets, found {got_d} latent columns"),
            ));
        }
        expect_header(&path, &csv.header, &latent_header(d, k))?;
        let t = csv.rows.len();
        let latents = DMatrix::from_fn(t, d, |r, c| csv.rows[r][1 + c]);
        let targets = DMatrix::from_fn(t, k, |r, c| csv.rows[r][1 + d + c]);
        trajectories.push(LatentTrajectory {
            latents,
            targets,
            label: e.label,
        });
    }
    LatentTrajectorySet::new(trajectories).map_err(|e: ProbeError| schema(manifest_path, e.to_string()))
}
