//! Seeded ground truth: spherical-cap taxel layouts, random contacts and
//! calibration datasets generated through the forward model.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibDataset, CalibSample};
use crate::geometry::Rotation;
use crate::kinematics::{KinematicChain, KinematicsError};
use crate::sensor_model::{
    cop_to_taxels, CopContact, MappingParams, SensorError, TaxelLayout, TaxelReading,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Grid of taxels on a spherical cap centred on the sensor origin, pole along `+z`.
///
/// Taxel `(r, c)` sits at latitude `u_r` (towards `+y`) and longitude `v_c`
/// (towards `+x`), both evenly spaced over the given extents and centred on
/// the pole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapLayoutSpec {
    pub radius: f64,
    pub rows: usize,
    pub cols: usize,
    /// Latitude span covered by the rows (rad).
    pub row_extent: f64,
    /// Longitude span covered by the columns (rad).
    pub col_extent: f64,
    /// Taxel frame axis that points along the inward surface normal.
    pub normal_axis: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub normal_only: bool,
}

impl Default for CapLayoutSpec {
    /// 4x6 cap of radius 10 mm at a 4.7 mm pitch along the pole meridians.
    fn default() -> Self {
        let pitch = 4.7e-3 / 10e-3;
        let m = MappingParams::default();
        CapLayoutSpec {
            radius: 10e-3,
            rows: 4,
            cols: 6,
            row_extent: 3.0 * pitch,
            col_extent: 5.0 * pitch,
            normal_axis: 2,
            epsilon: m.epsilon,
            sigma: m.sigma,
            lambda: m.lambda,
            normal_only: m.normal_only,
        }
    }
}

impl CapLayoutSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.radius > 0.0) {
            return Err(SynthError::InvalidSpec("radius must be positive".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(SynthError::InvalidSpec("rows and cols must be at least 1".into()));
        }
        if !(self.row_extent >= 0.0 && self.row_extent < std::f64::consts::PI)
            || !(self.col_extent >= 0.0 && self.col_extent < std::f64::consts::PI)
        {
            return Err(SynthError::InvalidSpec("angular extents must lie in [0, π)".into()));
        }
        if self.normal_axis > 2 {
            return Err(SynthError::InvalidSpec("normal_axis must be 0, 1 or 2".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> MappingParams {
        MappingParams {
            epsilon: self.epsilon,
            sigma: self.sigma,
            lambda: self.lambda,
            normal_only: self.normal_only,
            solve_over_all_taxels: false,
        }
    }

    fn grid(n: usize, extent: f64) -> Vec<f64> {
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|k| -extent / 2.0 + extent * k as f64 / (n - 1) as f64)
            .collect()
    }

    /// Outward unit direction at latitude `u`, longitude `v`.
    pub fn direction(u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(v.sin() * u.cos(), u.sin(), v.cos() * u.cos())
    }
}

/// Generated cap with its nominal (surface-aligned) taxel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CapLayout {
    pub spec: CapLayoutSpec,
    pub layout: TaxelLayout,
}

impl CapLayout {
    /// Inward surface normal at a surface point.
    pub fn inward_normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        -p.normalize()
    }

    /// Surface point at latitude `u`, longitude `v`.
    pub fn surface_point(&self, u: f64, v: f64) -> Vector3<f64> {
        CapLayoutSpec::direction(u, v) * self.spec.radius
    }

    /// Same cap with other taxel frame orientations (normals unchanged).
    pub fn with_orientations(&self, rotations: Vec<Rotation>) -> Result<TaxelLayout, SynthError> {
        Ok(self.layout.with_orientations(rotations)?)
    }
}

/// Frame whose `normal_axis` column is `normal`. The first tangent is the
/// projection of sensor `+x` onto the tangent plane (sensor `+y` if that
/// degenerates); the remaining axis completes a right-handed frame.
pub fn surface_frame(normal: &Vector3<f64>, normal_axis: usize) -> Rotation {
    let n = normal.normalize();
    let mut t = Vector3::x() - n * n.x;
    if t.norm() < 1e-6 {
        t = Vector3::y() - n * n.y;
    }
    let t1 = t.normalize();
    let t2 = n.cross(&t1);
    // Cyclic permutations of (n, t1, t2) keep the frame right-handed.
    let cols = match normal_axis {
        0 => [n, t1, t2],
        1 => [t2, n, t1],
        _ => [t1, t2, n],
    };
    Rotation::from_matrix_unchecked(Matrix3::from_columns(&cols))
}

pub fn generate_cap_layout(spec: &CapLayoutSpec) -> Result<CapLayout, SynthError> {
    spec.validate()?;
    let mut positions = Vec::with_capacity(spec.rows * spec.cols);
    let mut rotations = Vec::with_capacity(spec.rows * spec.cols);
    for u in CapLayoutSpec::grid(spec.rows, spec.row_extent) {
        for v in CapLayoutSpec::grid(spec.cols, spec.col_extent) {
            let d = CapLayoutSpec::direction(u, v);
            positions.push(d * spec.radius);
            rotations.push(surface_frame(&(-d), spec.normal_axis));
        }
    }
    let layout = TaxelLayout::new(positions, rotations, spec.normal_axis, spec.params())?;
    Ok(CapLayout { spec: *spec, layout })
}

/// Applies an independent random rotation of up to `max_angle` radians
/// (uniform angle, uniform axis) to each frame.
pub fn perturb_rotations<R: Rng>(rotations: &[Rotation], max_angle: f64, rng: &mut R) -> Vec<Rotation> {
    rotations
        .iter()
        .map(|r| {
            let axis = random_unit(rng);
            let angle = rng.random_range(0.0..=max_angle.max(0.0));
            Rotation::from_axis_angle(&axis, angle).compose(r)
        })
        .collect()
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Distribution of random contacts on the cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactSpec {
    /// Force magnitude range (N).
    pub force_min: f64,
    pub force_max: f64,
    /// Upper bound on the ratio of tangential to inward-normal force.
    pub max_shear_ratio: f64,
    /// Fraction of the taxel grid's angular extents that contact points cover.
    pub coverage: f64,
    pub seed: u64,
}

impl Default for ContactSpec {
    fn default() -> Self {
        ContactSpec {
            force_min: 0.5,
            force_max: 3.0,
            max_shear_ratio: 0.8,
            coverage: 1.0,
            seed: 0,
        }
    }
}

impl ContactSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.force_min >= 0.0 && self.force_max >= self.force_min) {
            return Err(SynthError::InvalidSpec("need 0 <= force_min <= force_max".into()));
        }
        if !(self.max_shear_ratio >= 0.0) {
            return Err(SynthError::InvalidSpec("max_shear_ratio must be non-negative".into()));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.5) {
            return Err(SynthError::InvalidSpec("coverage must lie in (0, 1.5]".into()));
        }
        Ok(())
    }
}

/// Seeded random contacts: positions on the cap surface, forces pressing
/// inward with a random tangential share.
pub fn sample_contacts(
    cap: &CapLayout,
    spec: &ContactSpec,
    count: usize,
) -> Result<Vec<CopContact>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half_u = cap.spec.row_extent / 2.0 * spec.coverage;
    let half_v = cap.spec.col_extent / 2.0 * spec.coverage;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u = if half_u > 0.0 { rng.random_range(-half_u..=half_u) } else { 0.0 };
        let v = if half_v > 0.0 { rng.random_range(-half_v..=half_v) } else { 0.0 };
        let position = cap.surface_point(u, v);
        let n = cap.inward_normal(&position);
        let tangent = {
            let r = random_unit(&mut rng);
            let t = r - n * n.dot(&r);
            if t.norm() > 1e-9 {
                t.normalize()
            } else {
                n.cross(&Vector3::x()).normalize()
            }
        };
        let shear = rng.random_range(0.0..=spec.max_shear_ratio);
        let magnitude = rng.random_range(spec.force_min..=spec.force_max);
        let force = (n + tangent * shear).normalize() * magnitude;
        out.push(CopContact {
            force,
            position,
            active_count: 0,
        });
    }
    Ok(out)
}

/// Which contact point the recorded torques are computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TorqueReference {
    /// The CoP that the inverse mapping recovers from the noiseless reading
    /// with the true taxel frames. Makes the torque model exactly
    /// self-consistent, so the calibration loss vanishes at the truth.
    #[default]
    ModelCop,
    /// The generating surface contact. Leaves a residual equal to the
    /// mapping's position/force bias.
    SurfaceContact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Each taxel force is scaled by `U(1 − a, 1 + a)`.
    pub force_scale: f64,
    /// Standard deviation of additive torque noise (N·m).
    pub torque_std: f64,
    /// Standard deviation of joint-angle jitter around the nominal pose (rad).
    pub q_jitter: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            force_scale: 0.0,
            torque_std: 0.0,
            q_jitter: 0.0,
            seed: 0,
        }
    }
}

/// A synthesized dataset with the contacts its torques were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: CalibDataset,
    /// Contact each sample's torque was computed at, in the sensor frame
    /// (`None` for zero-force contacts).
    pub torque_contacts: Vec<Option<CopContact>>,
}

/// Control rate of the recorded stream (Hz).
pub const SAMPLE_RATE: f64 = 20.0;

/// Readings from `true_layout` (true taxel frames), torques from static
/// equilibrium at the nominal joint pose.
pub fn synthesize_dataset(
    contacts: &[CopContact],
    true_layout: &TaxelLayout,
    chain: &KinematicChain,
    q_nominal: &[f64],
    noise: &NoiseSpec,
    reference: TorqueReference,
) -> Result<SynthDataset, SynthError> {
    if q_nominal.len() != chain.dof() {
        return Err(KinematicsError::DimensionMismatch {
            expected: chain.dof(),
            got: q_nominal.len(),
        }
        .into());
    }
    if !(noise.force_scale >= 0.0 && noise.force_scale < 1.0) {
        return Err(SynthError::InvalidSpec("force_scale must lie in [0, 1)".into()));
    }
    if !(noise.torque_std >= 0.0) || !(noise.q_jitter >= 0.0) {
        return Err(SynthError::InvalidSpec("noise deviations must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut samples = Vec::with_capacity(contacts.len());
    let mut torque_contacts = Vec::with_capacity(contacts.len());
    for (k, contact) in contacts.iter().enumerate() {
        let t = k as f64 / SAMPLE_RATE;
        let q: Vec<f64> = q_nominal
            .iter()
            .map(|&q0| if noise.q_jitter > 0.0 { q0 + noise.q_jitter * gauss.sample(&mut rng) } else { q0 })
            .collect();
        let mut reading = cop_to_taxels(contact, true_layout)?;
        reading.timestamp = t;

        let torque_contact = match reference {
            TorqueReference::SurfaceContact => Some(*contact),
            TorqueReference::ModelCop => {
                match crate::sensor_model::taxels_to_cop(&reading, true_layout) {
                    Ok(c) => Some(c),
                    Err(SensorError::NoContact) => None,
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let mut tau = match torque_contact {
            Some(c) => torque_at(chain, &q, &c)?,
            None => vec![0.0; chain.dof()],
        };

        if noise.force_scale > 0.0 {
            for f in reading.forces.iter_mut() {
                *f *= rng.random_range(1.0 - noise.force_scale..=1.0 + noise.force_scale);
            }
        }
        if noise.torque_std > 0.0 {
            for v in tau.iter_mut() {
                *v += noise.torque_std * gauss.sample(&mut rng);
            }
        }
        samples.push(CalibSample { reading, q, tau });
        torque_contacts.push(torque_contact);
    }
    Ok(SynthDataset {
        dataset: CalibDataset { samples },
        torque_contacts,
    })
}

/// `τ = −J(p)ᵀ f` for a sensor-frame contact at joint angles `q`.
pub fn torque_at(
    chain: &KinematicChain,
    q: &[f64],
    contact: &CopContact,
) -> Result<Vec<f64>, SynthError> {
    let frames = chain.joint_frames(q)?;
    let p = frames.sensor.transform_point(&contact.position);
    let f = frames.sensor.transform_vector(&contact.force);
    let jac = frames.point_jacobian(&p);
    Ok((-(jac.transpose() * f)).iter().copied().collect())
}

/// Everything a calibration benchmark needs.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub cap: CapLayout,
    pub chain: KinematicChain,
    pub q_nominal: Vec<f64>,
    pub true_rotations: Vec<Rotation>,
    pub contacts: Vec<CopContact>,
    pub data: SynthDataset,
}

/// Nominal finger pose used by the reference benchmark (rad).
pub const REFERENCE_Q: [f64; 4] = [0.1, 0.5, 0.6, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub cap: CapLayoutSpec,
    pub contacts: ContactSpec,
    pub count: usize,
    /// Largest perturbation of the true taxel frames from nominal (rad).
    pub max_perturbation: f64,
    pub noise: NoiseSpec,
    pub torque_reference: TorqueReference,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    /// 2400 samples: two minutes at 20 Hz, frames perturbed up to 30°.
    fn default() -> Self {
        BenchmarkSpec {
            cap: CapLayoutSpec::default(),
            contacts: ContactSpec::default(),
            count: 2400,
            max_perturbation: 30f64.to_radians(),
            noise: NoiseSpec::default(),
            torque_reference: TorqueReference::ModelCop,
            seed: 0,
        }
    }
}

/// Builds the cap, perturbs its frames, samples contacts and synthesizes the
/// dataset. Sub-generators are seeded from `spec.seed` so one seed fixes the run.
pub fn build_benchmark(spec: &BenchmarkSpec, chain: &KinematicChain, q_nominal: &[f64]) -> Result<Benchmark, SynthError> {
    let cap = generate_cap_layout(&spec.cap)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let true_rotations = perturb_rotations(cap.layout.orientations(), spec.max_perturbation, &mut rng);
    let true_layout = cap.with_orientations(true_rotations.clone())?;
    let contact_spec = ContactSpec {
        seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(spec.contacts.seed),
        ..spec.contacts
    };
    let contacts = sample_contacts(&cap, &contact_spec, spec.count)?;
    let noise = NoiseSpec {
        seed: spec.seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(spec.noise.seed),
        ..spec.noise
    };
    let data = synthesize_dataset(&contacts, &true_layout, chain, q_nominal, &noise, spec.torque_reference)?;
    Ok(Benchmark {
        cap,
        chain: chain.clone(),
        q_nominal: q_nominal.to_vec(),
        true_rotations,
        contacts,
        data,
    })
}

/// Zero-force reading with the layout's taxel count.
pub fn idle_reading(layout: &TaxelLayout, timestamp: f64) -> TaxelReading {
    TaxelReading::zeros(layout.len(), timestamp)
}
