//! Center-of-pressure contact representation and the taxel/CoP mapping.
//!
//! A contact is summarized by one force `f_cop` applied at one point
//! `p_cop`, both in the sensor frame. The stress-distribution model maps it
//! to per-taxel forces `fᵢ = Mᵢ f_cop` with
//!
//! ```text
//! Mᵢ = wᵢ (b̂ᵢ n̂_copᵀ + I − n̂_cop n̂_copᵀ)
//! wᵢ = exp(−‖pᵢ − p_cop‖² / 2σ²)
//! b̂ᵢ = normalize(wᵢ n̂ᵢ + (1 − wᵢ) v̂ᵢ),   v̂ᵢ = (pᵢ − p_cop) / ‖pᵢ − p_cop‖
//! ```
//!
//! The inverse direction estimates `p_cop` as the force-magnitude weighted
//! mean of the active taxel positions, `n̂_cop` by inverse-distance weighting
//! of taxel normals, and `f_cop` by ridge-regularized least squares over the
//! stacked `Mᵢ`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Rotation};

/// Distance below which a taxel is treated as coincident with the CoP.
pub const COINCIDENCE_TOLERANCE: f64 = 1e-9;
/// Gaussian weights below this emit exact zero taxel forces.
pub const WEIGHT_CUTOFF: f64 = 1e-8;
/// Bound on the forward-direction normal/active-set refinement.
pub const FORWARD_NORMAL_ITERATIONS: usize = 8;
/// Condition number of the normal-equation matrix above which the solve is flagged.
pub const ILL_CONDITIONED: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensorError {
    #[error("no active taxels")]
    NoContact,
    #[error("inverse-distance normal estimate vanished")]
    DegenerateNormal,
    #[error("blended direction for taxel {0} vanished")]
    DegenerateBlend(usize),
    #[error("reading has {got} taxels, layout has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Hyperparameters of the stress-distribution model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    /// Activation threshold on taxel force norm (N).
    pub epsilon: f64,
    /// Gaussian spread (m).
    pub sigma: f64,
    /// Ridge parameter (N).
    pub lambda: f64,
    /// Keep only the surface-normal component of the CoP force.
    pub normal_only: bool,
    /// Stack every taxel into the least-squares system instead of the active set.
    pub solve_over_all_taxels: bool,
}

impl Default for MappingParams {
    /// σ of 3 mm keeps neighbouring taxels distinguishable on a 4.7 mm pitch;
    /// much wider kernels make taxel frame rotations hard to identify from torques.
    fn default() -> Self {
        MappingParams {
            epsilon: 0.05,
            sigma: 3e-3,
            lambda: 1e-3,
            normal_only: false,
            solve_over_all_taxels: false,
        }
    }
}

/// Sensor geometry plus model hyperparameters. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxelLayout {
    positions: Vec<Vector3<f64>>,
    orientations: Vec<Rotation>,
    normals: Vec<Vector3<f64>>,
    normal_axis: usize,
    params: MappingParams,
}

impl TaxelLayout {
    /// Surface normals are taken from `orientations` as `Rᵢ e_axis`.
    pub fn new(
        positions: Vec<Vector3<f64>>,
        orientations: Vec<Rotation>,
        normal_axis: usize,
        params: MappingParams,
    ) -> Result<Self, SensorError> {
        if normal_axis > 2 {
            return Err(SensorError::InvalidLayout(format!(
                "normal_axis must be 0, 1 or 2, got {normal_axis}"
            )));
        }
        let normals = orientations
            .iter()
            .map(|r| r.matrix().column(normal_axis).into_owned())
            .collect();
        Self::with_normals(positions, orientations, normals, normal_axis, params)
    }

    /// Builds a layout whose surface normals are given independently of the
    /// taxel frame orientations (the orientations may be perturbed away from
    /// the nominal surface-aligned frames).
    pub fn with_normals(
        positions: Vec<Vector3<f64>>,
        orientations: Vec<Rotation>,
        normals: Vec<Vector3<f64>>,
        normal_axis: usize,
        params: MappingParams,
    ) -> Result<Self, SensorError> {
        let n = positions.len();
        if n == 0 {
            return Err(SensorError::InvalidLayout("layout has no taxels".into()));
        }
        if orientations.len() != n || normals.len() != n {
            return Err(SensorError::InvalidLayout(format!(
                "{n} positions but {} orientations and {} normals",
                orientations.len(),
                normals.len()
            )));
        }
        if normal_axis > 2 {
            return Err(SensorError::InvalidLayout(format!(
                "normal_axis must be 0, 1 or 2, got {normal_axis}"
            )));
        }
        if !(params.epsilon > 0.0) || !(params.sigma > 0.0) || !(params.lambda >= 0.0) {
            return Err(SensorError::InvalidLayout(format!(
                "need epsilon > 0, sigma > 0, lambda >= 0 (got {}, {}, {})",
                params.epsilon, params.sigma, params.lambda
            )));
        }
        for (i, nrm) in normals.iter().enumerate() {
            if (nrm.norm() - 1.0).abs() > 1e-9 {
                return Err(SensorError::InvalidLayout(format!(
                    "normal of taxel {i} is not unit length"
                )));
            }
        }
        for i in 0..n {
            if positions[i].iter().any(|v| !v.is_finite()) {
                return Err(SensorError::InvalidLayout(format!("taxel {i} position is not finite")));
            }
            for j in 0..i {
                if (positions[i] - positions[j]).norm() <= 1e-6 {
                    return Err(SensorError::InvalidLayout(format!(
                        "taxels {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(TaxelLayout {
            positions,
            orientations,
            normals,
            normal_axis,
            params,
        })
    }

    /// Same geometry and normals with different taxel frame orientations.
    pub fn with_orientations(&self, orientations: Vec<Rotation>) -> Result<Self, SensorError> {
        if orientations.len() != self.len() {
            return Err(SensorError::DimensionMismatch {
                expected: self.len(),
                got: orientations.len(),
            });
        }
        Ok(TaxelLayout {
            orientations,
            ..self.clone()
        })
    }

    pub fn with_params(&self, params: MappingParams) -> Result<Self, SensorError> {
        Self::with_normals(
            self.positions.clone(),
            self.orientations.clone(),
            self.normals.clone(),
            self.normal_axis,
            params,
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn orientations(&self) -> &[Rotation] {
        &self.orientations
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn normal_axis(&self) -> usize {
        self.normal_axis
    }

    pub fn params(&self) -> &MappingParams {
        &self.params
    }
}

/// Per-taxel forces, each in its own taxel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxelReading {
    pub forces: Vec<Vector3<f64>>,
    pub timestamp: f64,
}

impl TaxelReading {
    pub fn zeros(n: usize, timestamp: f64) -> Self {
        TaxelReading {
            forces: vec![Vector3::zeros(); n],
            timestamp,
        }
    }

    /// Rotates every taxel force into the sensor frame with the given frames.
    pub fn to_sensor_frame(&self, rotations: &[Rotation]) -> Result<Vec<Vector3<f64>>, SensorError> {
        if rotations.len() != self.forces.len() {
            return Err(SensorError::DimensionMismatch {
                expected: rotations.len(),
                got: self.forces.len(),
            });
        }
        Ok(self
            .forces
            .iter()
            .zip(rotations)
            .map(|(f, r)| r.apply(f))
            .collect())
    }
}

/// The CoP contact: one force applied at one point, in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopContact {
    pub force: Vector3<f64>,
    pub position: Vector3<f64>,
    pub active_count: usize,
}

/// Indices of taxels whose force norm exceeds `epsilon`.
pub fn active_set(reading: &TaxelReading, layout: &TaxelLayout) -> Vec<usize> {
    active_indices(&reading.forces, layout.params.epsilon)
}

fn active_indices(forces: &[Vector3<f64>], epsilon: f64) -> Vec<usize> {
    forces
        .iter()
        .enumerate()
        .filter(|(_, f)| f.norm() > epsilon)
        .map(|(i, _)| i)
        .collect()
}

/// Force-magnitude weighted mean of the active taxel positions.
pub fn estimate_cop_position(
    reading: &TaxelReading,
    layout: &TaxelLayout,
) -> Result<Vector3<f64>, SensorError> {
    check_len(reading.forces.len(), layout)?;
    let active = active_set(reading, layout);
    weighted_position(&reading.forces, layout, &active)
}

fn weighted_position(
    forces: &[Vector3<f64>],
    layout: &TaxelLayout,
    active: &[usize],
) -> Result<Vector3<f64>, SensorError> {
    if active.is_empty() {
        return Err(SensorError::NoContact);
    }
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for &i in active {
        let a = forces[i].norm();
        num += layout.positions[i] * a;
        den += a;
    }
    Ok(num / den)
}

/// Inverse-distance weighted surface normal at `p_cop` over the `active` taxels.
///
/// A taxel closer than [`COINCIDENCE_TOLERANCE`] to `p_cop` wins outright.
pub fn estimate_cop_normal(
    p_cop: &Vector3<f64>,
    layout: &TaxelLayout,
    active: &[usize],
) -> Result<Vector3<f64>, SensorError> {
    if active.is_empty() {
        return Err(SensorError::NoContact);
    }
    Ok(normal_estimate(p_cop, layout, active)?.normal)
}

struct NormalEstimate {
    normal: Vector3<f64>,
    /// Unnormalized inverse-distance sum, `None` when the coincidence rule fired.
    raw: Option<Vector3<f64>>,
}

fn normal_estimate(
    p_cop: &Vector3<f64>,
    layout: &TaxelLayout,
    indices: &[usize],
) -> Result<NormalEstimate, SensorError> {
    let mut m = Vector3::zeros();
    for &i in indices {
        let d = (layout.positions[i] - p_cop).norm();
        if d < COINCIDENCE_TOLERANCE {
            return Ok(NormalEstimate {
                normal: layout.normals[i],
                raw: None,
            });
        }
        m += layout.normals[i] / d;
    }
    let norm = m.norm();
    if norm < 1e-9 {
        return Err(SensorError::DegenerateNormal);
    }
    Ok(NormalEstimate {
        normal: m / norm,
        raw: Some(m),
    })
}

fn gaussian_weight(distance: f64, sigma: f64) -> f64 {
    (-distance * distance / (2.0 * sigma * sigma)).exp()
}

/// Blend of the taxel normal and the CoP-to-taxel direction, weighted by the
/// Gaussian radial weight.
pub fn blended_direction(
    p_cop: &Vector3<f64>,
    taxel: usize,
    layout: &TaxelLayout,
) -> Result<Vector3<f64>, SensorError> {
    Ok(TaxelTerms::new(p_cop, taxel, layout)?.blend)
}

/// `Mᵢ = wᵢ (b̂ᵢ n̂_copᵀ + I − n̂_cop n̂_copᵀ)`.
pub fn transfer_matrix(
    p_cop: &Vector3<f64>,
    n_cop: &Vector3<f64>,
    taxel: usize,
    layout: &TaxelLayout,
) -> Result<Matrix3<f64>, SensorError> {
    Ok(TaxelTerms::new(p_cop, taxel, layout)?.transfer(n_cop))
}

/// Tangent-plane projector `I − n nᵀ`.
pub fn shear_projection(n_cop: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - n_cop * n_cop.transpose()
}

/// Intermediate quantities of one taxel's transfer matrix.
#[derive(Debug, Clone, Copy)]
struct TaxelTerms {
    offset: Vector3<f64>,
    distance: f64,
    weight: f64,
    /// Unnormalized blend `w n̂ + (1 − w) v̂`.
    mix: Vector3<f64>,
    blend: Vector3<f64>,
    sigma: f64,
    coincident: bool,
}

impl TaxelTerms {
    fn new(p_cop: &Vector3<f64>, taxel: usize, layout: &TaxelLayout) -> Result<Self, SensorError> {
        let offset = layout.positions[taxel] - p_cop;
        let distance = offset.norm();
        let normal = layout.normals[taxel];
        if distance < COINCIDENCE_TOLERANCE {
            return Ok(TaxelTerms {
                offset,
                distance,
                weight: 1.0,
                mix: normal,
                blend: normal,
                sigma: layout.params.sigma,
                coincident: true,
            });
        }
        let weight = gaussian_weight(distance, layout.params.sigma);
        let mix = normal * weight + offset * ((1.0 - weight) / distance);
        let norm = mix.norm();
        if norm < 1e-9 {
            return Err(SensorError::DegenerateBlend(taxel));
        }
        Ok(TaxelTerms {
            offset,
            distance,
            weight,
            mix,
            blend: mix / norm,
            sigma: layout.params.sigma,
            coincident: false,
        })
    }

    fn transfer(&self, n_cop: &Vector3<f64>) -> Matrix3<f64> {
        (self.blend * n_cop.transpose() + shear_projection(n_cop)) * self.weight
    }

    /// Derivative of the transfer matrix along a CoP displacement `dp`, given
    /// the matching change `dn` of the CoP normal.
    fn transfer_derivative(
        &self,
        taxel_normal: &Vector3<f64>,
        n_cop: &Vector3<f64>,
        dp: &Vector3<f64>,
        dn: &Vector3<f64>,
    ) -> Matrix3<f64> {
        let w = self.weight;
        let (dw, db) = if self.coincident {
            (0.0, Vector3::zeros())
        } else {
            let d = self.distance;
            let v = self.offset / d;
            let dr = -dp;
            let dd = v.dot(&dr);
            let dw = -w * d * dd / (self.sigma * self.sigma);
            let dv = (dr - v * v.dot(&dr)) / d;
            let dc = taxel_normal * dw - v * dw + dv * (1.0 - w);
            let c_norm = self.mix.norm();
            let db = (dc - self.blend * self.blend.dot(&dc)) / c_norm;
            (dw, db)
        };
        let base = self.blend * n_cop.transpose() + shear_projection(n_cop);
        let d_base =
            db * n_cop.transpose() + self.blend * dn.transpose() - dn * n_cop.transpose() - n_cop * dn.transpose();
        base * dw + d_base * w
    }
}

/// Maps a CoP contact to per-taxel forces in taxel frames.
///
/// The CoP normal is estimated by inverse-distance weighting over the taxels
/// that end up active, starting from all taxels and refining until the
/// active set stops changing. In normal-only mode the contact force is first
/// reduced to its component along that normal.
pub fn cop_to_taxels(contact: &CopContact, layout: &TaxelLayout) -> Result<TaxelReading, SensorError> {
    let forces = cop_to_sensor_forces(&contact.force, &contact.position, layout)?;
    Ok(TaxelReading {
        forces: forces
            .iter()
            .zip(&layout.orientations)
            .map(|(f, r)| r.matrix().transpose() * f)
            .collect(),
        timestamp: 0.0,
    })
}

/// Per-taxel forces in the sensor frame for a CoP contact.
pub fn cop_to_sensor_forces(
    force: &Vector3<f64>,
    position: &Vector3<f64>,
    layout: &TaxelLayout,
) -> Result<Vec<Vector3<f64>>, SensorError> {
    let n = layout.len();
    if force.iter().chain(position.iter()).any(|v| !v.is_finite()) {
        return Err(SensorError::InvalidLayout("contact is not finite".into()));
    }
    if force.iter().all(|&v| v == 0.0) {
        return Ok(vec![Vector3::zeros(); n]);
    }
    // The inverse mapping estimates the normal over the active taxels only, so
    // the forward normal is iterated to agree with the active set it produces.
    let mut set: Vec<usize> = (0..n).collect();
    let mut forces = Vec::new();
    for _ in 0..FORWARD_NORMAL_ITERATIONS {
        let n_cop = normal_estimate(position, layout, &set)?.normal;
        forces = forward_forces(force, position, &n_cop, layout)?;
        let active = active_indices(&forces, layout.params.epsilon);
        if active.is_empty() || active == set {
            break;
        }
        set = active;
    }
    Ok(forces)
}

fn forward_forces(
    force: &Vector3<f64>,
    position: &Vector3<f64>,
    n_cop: &Vector3<f64>,
    layout: &TaxelLayout,
) -> Result<Vec<Vector3<f64>>, SensorError> {
    let f = if layout.params.normal_only {
        n_cop * n_cop.dot(force)
    } else {
        *force
    };
    (0..layout.len())
        .map(|i| {
            let terms = TaxelTerms::new(position, i, layout)?;
            if terms.weight < WEIGHT_CUTOFF {
                Ok(Vector3::zeros())
            } else {
                Ok(terms.transfer(n_cop) * f)
            }
        })
        .collect()
}

/// Result of the regularized least-squares force solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceSolve {
    pub force: Vector3<f64>,
    pub condition_number: f64,
    /// Set when the condition number exceeded [`ILL_CONDITIONED`]; the solve
    /// then went through a pseudo-inverse.
    pub ill_conditioned: bool,
}

/// Solves `(AᵀA + λ²I) f = Aᵀb` for the CoP force at a given CoP position.
/// Taxel forces are in taxel frames and are rotated with the layout orientations.
pub fn solve_cop_force(
    reading: &TaxelReading,
    p_cop: &Vector3<f64>,
    layout: &TaxelLayout,
) -> Result<ForceSolve, SensorError> {
    check_len(reading.forces.len(), layout)?;
    let forces = reading.to_sensor_frame(&layout.orientations)?;
    let active = active_indices(&forces, layout.params.epsilon);
    if active.is_empty() {
        return Err(SensorError::NoContact);
    }
    let normal = normal_estimate(p_cop, layout, &active)?;
    let rows = solve_rows(layout, &active);
    let system = NormalEquations::assemble(&forces, p_cop, &normal.normal, layout, &rows)?;
    Ok(system.solve)
}

fn solve_rows(layout: &TaxelLayout, active: &[usize]) -> Vec<usize> {
    if layout.params.solve_over_all_taxels {
        (0..layout.len()).collect()
    } else {
        active.to_vec()
    }
}

/// Assembled least-squares system over a row set.
struct NormalEquations {
    rows: Vec<usize>,
    transfers: Vec<Matrix3<f64>>,
    inverse: Matrix3<f64>,
    solve: ForceSolve,
}

impl NormalEquations {
    fn assemble(
        forces: &[Vector3<f64>],
        p_cop: &Vector3<f64>,
        n_cop: &Vector3<f64>,
        layout: &TaxelLayout,
        rows: &[usize],
    ) -> Result<Self, SensorError> {
        let mut transfers = Vec::with_capacity(rows.len());
        let lambda = layout.params.lambda;
        let mut h = Matrix3::identity() * (lambda * lambda);
        let mut g = Vector3::zeros();
        for &i in rows {
            let t = TaxelTerms::new(p_cop, i, layout)?;
            let m = t.transfer(n_cop);
            h += m.transpose() * m;
            g += m.transpose() * forces[i];
            transfers.push(m);
        }
        let eig = SymmetricEigen::new(h);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
        let ill_conditioned = !(condition_number <= ILL_CONDITIONED);
        let inverse = match (ill_conditioned, h.cholesky()) {
            (false, Some(chol)) => chol.inverse(),
            _ => pseudo_inverse(&eig),
        };
        let force = inverse * g;
        Ok(NormalEquations {
            rows: rows.to_vec(),
            transfers,
            inverse,
            solve: ForceSolve {
                force,
                condition_number,
                ill_conditioned,
            },
        })
    }
}

fn pseudo_inverse(eig: &SymmetricEigen<f64, nalgebra::U3>) -> Matrix3<f64> {
    let max = eig.eigenvalues.amax();
    let mut inv = Matrix3::zeros();
    for k in 0..3 {
        let l = eig.eigenvalues[k];
        if l > max * 1e-15 {
            let q = eig.eigenvectors.column(k);
            inv += q * q.transpose() / l;
        }
    }
    inv
}

/// Full inverse-mapping result, with the pieces needed for differentiation.
#[derive(Debug, Clone)]
pub struct CopEstimate {
    pub contact: CopContact,
    pub normal: Vector3<f64>,
    pub active: Vec<usize>,
    pub solve: ForceSolve,
    rows: Vec<usize>,
    transfers: Vec<Matrix3<f64>>,
    inverse: Matrix3<f64>,
    normal_only: bool,
}

impl CopEstimate {
    /// `∂f_cop/∂fᵢ` for a sensor-frame taxel force, holding the CoP position
    /// and normal fixed. Zero for taxels outside the solve rows.
    ///
    /// Exact for any change that preserves the taxel force norms, such as a
    /// change of taxel frame rotation.
    pub fn force_sensitivity(&self, taxel: usize) -> Matrix3<f64> {
        match self.rows.iter().position(|&r| r == taxel) {
            Some(k) => {
                let base = self.inverse * self.transfers[k].transpose();
                if self.normal_only {
                    self.normal * self.normal.transpose() * base
                } else {
                    base
                }
            }
            None => Matrix3::zeros(),
        }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

/// Inverse mapping from taxel-frame forces to the CoP contact.
pub fn taxels_to_cop(reading: &TaxelReading, layout: &TaxelLayout) -> Result<CopContact, SensorError> {
    check_len(reading.forces.len(), layout)?;
    let forces = reading.to_sensor_frame(&layout.orientations)?;
    Ok(estimate_from_sensor_forces(&forces, layout)?.contact)
}

/// Inverse mapping from sensor-frame taxel forces.
pub fn estimate_from_sensor_forces(
    forces: &[Vector3<f64>],
    layout: &TaxelLayout,
) -> Result<CopEstimate, SensorError> {
    check_len(forces.len(), layout)?;
    let active = active_indices(forces, layout.params.epsilon);
    let position = weighted_position(forces, layout, &active)?;
    let normal = normal_estimate(&position, layout, &active)?.normal;
    let rows = solve_rows(layout, &active);
    let system = NormalEquations::assemble(forces, &position, &normal, layout, &rows)?;
    let force = if layout.params.normal_only {
        normal * normal.dot(&system.solve.force)
    } else {
        system.solve.force
    };
    Ok(CopEstimate {
        contact: CopContact {
            force,
            position,
            active_count: active.len(),
        },
        normal,
        active,
        solve: system.solve,
        rows: system.rows,
        transfers: system.transfers,
        inverse: system.inverse,
        normal_only: layout.params.normal_only,
    })
}

/// Jacobian of the estimated CoP force with respect to every sensor-frame
/// taxel force, including the dependence through the CoP position and normal.
/// The active set is held fixed. Returns the estimate and one 3x3 block per taxel.
pub fn force_jacobian(
    forces: &[Vector3<f64>],
    layout: &TaxelLayout,
) -> Result<(CopEstimate, Vec<Matrix3<f64>>), SensorError> {
    let est = estimate_from_sensor_forces(forces, layout)?;
    let p = est.contact.position;
    let n = est.normal;
    let normal = normal_estimate(&p, layout, &est.active)?;
    let raw_force = est.solve.force;

    // ∂n̂_cop/∂p, one column per coordinate direction.
    let mut dn_dp = Matrix3::zeros();
    if let Some(m) = normal.raw {
        let mut dm = Matrix3::zeros();
        for &i in &est.active {
            let r = layout.positions[i] - p;
            let d = r.norm();
            // ∂(1/d)/∂p = r / d³
            dm += layout.normals[i] * (r / (d * d * d)).transpose();
        }
        dn_dp = (Matrix3::identity() - n * n.transpose()) * dm / m.norm();
    }

    // ∂f/∂p through the transfer matrices, holding the taxel forces fixed.
    let mut df_dp = Matrix3::zeros();
    let mut rhs = Matrix3::zeros();
    for k in 0..3 {
        let dp = Vector3::ith(k, 1.0);
        let dn: Vector3<f64> = dn_dp.column(k).into();
        let mut acc = Vector3::zeros();
        for (idx, &i) in est.rows.iter().enumerate() {
            let t = TaxelTerms::new(&p, i, layout)?;
            let m = est.transfers[idx];
            let dm = t.transfer_derivative(&layout.normals[i], &n, &dp, &dn);
            acc += dm.transpose() * (forces[i] - m * raw_force) - m.transpose() * (dm * raw_force);
        }
        rhs.set_column(k, &acc);
    }
    df_dp += est.inverse * rhs;

    // ∂p/∂fⱼ = (pⱼ − p) ûⱼᵀ / Σ‖fᵢ‖
    let total: f64 = est.active.iter().map(|&i| forces[i].norm()).sum();
    let mut blocks = vec![Matrix3::zeros(); layout.len()];
    for (idx, &i) in est.rows.iter().enumerate() {
        blocks[i] = est.inverse * est.transfers[idx].transpose();
    }
    let mut dp_df = vec![Matrix3::zeros(); layout.len()];
    for &j in &est.active {
        let u = forces[j] / forces[j].norm();
        dp_df[j] = (layout.positions[j] - p) * u.transpose() / total;
        blocks[j] += df_dp * dp_df[j];
    }

    if layout.params.normal_only {
        let nn = n * n.transpose();
        // ∂(n nᵀ f)/∂p
        let mut dproj_dp = Matrix3::zeros();
        for k in 0..3 {
            let dn: Vector3<f64> = dn_dp.column(k).into();
            dproj_dp.set_column(k, &(dn * n.dot(&raw_force) + n * dn.dot(&raw_force)));
        }
        for j in 0..layout.len() {
            blocks[j] = nn * blocks[j] + dproj_dp * dp_df[j];
        }
    }
    Ok((est, blocks))
}

fn check_len(got: usize, layout: &TaxelLayout) -> Result<(), SensorError> {
    if got != layout.len() {
        return Err(SensorError::DimensionMismatch {
            expected: layout.len(),
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn params(sigma: f64, lambda: f64) -> MappingParams {
        MappingParams {
            epsilon: 0.1,
            sigma,
            lambda,
            ..MappingParams::default()
        }
    }

    /// `side x side` flat grid in the xy-plane at `pitch`, normals along +z.
    fn flat_patch(side: usize, pitch: f64, p: MappingParams) -> TaxelLayout {
        let mut positions = Vec::new();
        for r in 0..side {
            for c in 0..side {
                positions.push(Vector3::new(c as f64 * pitch, r as f64 * pitch, 0.0));
            }
        }
        let n = positions.len();
        TaxelLayout::new(positions, vec![Rotation::identity(); n], 2, p).unwrap()
    }

    #[test]
    fn active_set_thresholds_strictly() {
        let layout = flat_patch(2, 1e-2, params(3e-3, 1e-3));
        let mut r = TaxelReading::zeros(4, 0.0);
        assert!(active_set(&r, &layout).is_empty());
        r.forces[0] = Vector3::new(0.05, 0.0, 0.0);
        r.forces[1] = Vector3::new(0.0, 0.2, 0.0);
        r.forces[2] = Vector3::new(0.0, 0.0, 0.3);
        r.forces[3] = Vector3::new(0.1, 0.0, 0.0);
        assert_eq!(active_set(&r, &layout), vec![1, 2]);
    }

    #[test]
    fn position_is_weighted_mean() {
        let layout = flat_patch(2, 1e-2, params(3e-3, 1e-3));
        let mut r = TaxelReading::zeros(4, 0.0);
        r.forces[3] = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(estimate_cop_position(&r, &layout).unwrap(), layout.positions()[3]);

        r.forces[0] = Vector3::new(0.0, 0.0, 1.0);
        let mid = estimate_cop_position(&r, &layout).unwrap();
        assert!((mid - Vector3::new(5e-3, 5e-3, 0.0)).norm() < 1e-15);

        let mut r = TaxelReading::zeros(4, 0.0);
        r.forces[0] = Vector3::new(1.0, 0.0, 0.0);
        r.forces[1] = Vector3::new(0.0, 2.0, 0.0);
        r.forces[2] = Vector3::new(0.0, 0.0, -3.0);
        // (1·(0,0) + 2·(10,0) + 3·(0,10)) / 6 mm
        let expected = Vector3::new(20e-3 / 6.0, 30e-3 / 6.0, 0.0);
        assert!((estimate_cop_position(&r, &layout).unwrap() - expected).norm() < 1e-15);

        let zero = TaxelReading::zeros(4, 0.0);
        assert_eq!(estimate_cop_position(&zero, &layout), Err(SensorError::NoContact));
    }

    #[test]
    fn normal_estimates() {
        let layout = flat_patch(3, 4.7e-3, params(3e-3, 1e-3));
        let all: Vec<usize> = (0..9).collect();
        let n = estimate_cop_normal(&Vector3::new(1e-3, 2e-3, 1e-3), &layout, &all).unwrap();
        assert!((n - Vector3::z()).norm() < 1e-12);

        // Two taxels with normals at ±45° about y, queried at the midpoint.
        let a = Rotation::from_axis_angle(&Vector3::y(), std::f64::consts::FRAC_PI_4);
        let b = Rotation::from_axis_angle(&Vector3::y(), -std::f64::consts::FRAC_PI_4);
        let tilted = TaxelLayout::new(
            vec![Vector3::new(-1e-3, 0.0, 0.0), Vector3::new(1e-3, 0.0, 0.0)],
            vec![a, b],
            2,
            params(3e-3, 1e-3),
        )
        .unwrap();
        let n = estimate_cop_normal(&Vector3::new(0.0, 0.0, 0.0), &tilted, &[0, 1]).unwrap();
        assert!((n - Vector3::z()).norm() < 1e-12);
        // Coincident taxel wins.
        let n = estimate_cop_normal(&Vector3::new(-1e-3, 0.0, 0.0), &tilted, &[0, 1]).unwrap();
        assert!((n - tilted.normals()[0]).norm() < 1e-15);
        let expected = Vector3::new(FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2);
        assert!((n - expected).norm() < 1e-12);
    }

    #[test]
    fn blended_direction_limits() {
        let sigma = 3e-3;
        let layout = TaxelLayout::new(
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec![Rotation::identity(); 2],
            2,
            params(sigma, 1e-3),
        )
        .unwrap();
        assert_eq!(blended_direction(&Vector3::zeros(), 0, &layout).unwrap(), Vector3::z());
        // 1 m away from the taxel: w underflows, b̂ = v̂.
        let far = blended_direction(&Vector3::zeros(), 1, &layout).unwrap();
        assert!((far - Vector3::x()).norm() < 1e-6);

        let d = sigma * (2.0 * 2f64.ln()).sqrt();
        let p = Vector3::new(0.0, -d, 0.0);
        let b = blended_direction(&p, 0, &layout).unwrap();
        let expected = (Vector3::z() * 0.5 + Vector3::y() * 0.5).normalize();
        assert!((b - expected).norm() < 1e-12);
    }

    #[test]
    fn transfer_matrix_cases() {
        let layout = flat_patch(3, 4.7e-3, params(3e-3, 1e-3));
        let z = Vector3::z();
        let at = transfer_matrix(&layout.positions()[4], &z, 4, &layout).unwrap();
        assert!((at - Matrix3::identity()).norm() < 1e-15);

        let far = flat_patch(2, 0.1, params(3e-3, 1e-3));
        let m = transfer_matrix(&Vector3::zeros(), &z, 3, &far).unwrap();
        assert!(m.norm() < 1e-6);

        // Tilted taxel at mid range against a direct evaluation of the formula.
        let r = Rotation::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5).normalize(), 0.4);
        let pos = Vector3::new(2e-3, -1.5e-3, 0.7e-3);
        let layout = TaxelLayout::new(vec![pos], vec![r], 2, params(3e-3, 1e-3)).unwrap();
        let p = Vector3::new(0.3e-3, 0.2e-3, -0.1e-3);
        let nc = Vector3::new(0.1, -0.2, 1.0).normalize();
        let got = transfer_matrix(&p, &nc, 0, &layout).unwrap();

        let ni = r.matrix().column(2).into_owned();
        let diff = pos - p;
        let dist = (diff.x.powi(2) + diff.y.powi(2) + diff.z.powi(2)).sqrt();
        let w = (-(dist * dist) / (2.0 * 3e-3 * 3e-3)).exp();
        let mix = ni * w + diff * ((1.0 - w) / dist);
        let b = mix / mix.norm();
        let mut expected = Matrix3::zeros();
        for a in 0..3 {
            for c in 0..3 {
                let eye = if a == c { 1.0 } else { 0.0 };
                expected[(a, c)] = w * (b[a] * nc[c] + eye - nc[a] * nc[c]);
            }
        }
        assert!((got - expected).abs().max() < 1e-15);
    }

    #[test]
    fn forward_zero_and_concentrated() {
        let layout = flat_patch(3, 4.7e-3, params(0.5e-3, 1e-3));
        let contact = CopContact {
            force: Vector3::zeros(),
            position: layout.positions()[4],
            active_count: 0,
        };
        let r = cop_to_taxels(&contact, &layout).unwrap();
        assert!(r.forces.iter().all(|f| *f == Vector3::zeros()));

        let rots: Vec<Rotation> = (0..9)
            .map(|k| Rotation::from_axis_angle(&Vector3::new(1.0, k as f64, 2.0).normalize(), 0.1 * k as f64))
            .collect();
        let layout = layout.with_orientations(rots).unwrap();
        let f = Vector3::new(0.3, -0.4, 1.2);
        let contact = CopContact {
            force: f,
            position: layout.positions()[4],
            active_count: 0,
        };
        let r = cop_to_taxels(&contact, &layout).unwrap();
        let expected = layout.orientations()[4].matrix().transpose() * f;
        assert!((r.forces[4] - expected).norm() < 1e-6);
        for (i, fi) in r.forces.iter().enumerate() {
            if i != 4 {
                assert!(fi.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn solve_identity_and_ridge() {
        let layout = flat_patch(3, 4.7e-3, params(0.5e-3, 0.0));
        let mut r = TaxelReading::zeros(9, 0.0);
        r.forces[4] = Vector3::new(0.2, 0.1, 1.0);
        let s = solve_cop_force(&r, &layout.positions()[4], &layout).unwrap();
        assert!((s.force - r.forces[4]).norm() < 1e-14);

        // b = 0 with λ > 0 shrinks to zero; reachable only below the active-set filter.
        let ridge = flat_patch(3, 4.7e-3, params(3e-3, 1e-3));
        let zeros = vec![Vector3::zeros(); 9];
        let rows: Vec<usize> = (0..9).collect();
        let sys = NormalEquations::assemble(&zeros, &ridge.positions()[4], &Vector3::z(), &ridge, &rows).unwrap();
        assert_eq!(sys.solve.force, Vector3::zeros());
    }

    #[test]
    fn solve_recovers_forward_force_at_true_position() {
        let p = MappingParams {
            epsilon: 0.05,
            sigma: 3e-3,
            lambda: 1e-6,
            ..MappingParams::default()
        };
        let layout = flat_patch(4, 4.7e-3, p);
        let contact = CopContact {
            force: Vector3::new(0.4, -0.3, 2.0),
            position: Vector3::new(6.1e-3, 5.3e-3, 0.0),
            active_count: 0,
        };
        let r = cop_to_taxels(&contact, &layout).unwrap();
        let s = solve_cop_force(&r, &contact.position, &layout).unwrap();
        assert!((s.force - contact.force).norm() / contact.force.norm() < 1e-6);
        assert!(!s.ill_conditioned);
    }

    #[test]
    fn inverse_no_contact_and_single_taxel() {
        let layout = flat_patch(3, 4.7e-3, params(3e-3, 1e-3));
        assert_eq!(
            taxels_to_cop(&TaxelReading::zeros(9, 0.0), &layout),
            Err(SensorError::NoContact)
        );
        let rot = Rotation::from_axis_angle(&Vector3::x(), 0.3);
        let mut rots = vec![Rotation::identity(); 9];
        rots[2] = rot;
        let layout = layout.with_orientations(rots).unwrap();
        let mut r = TaxelReading::zeros(9, 0.0);
        r.forces[2] = Vector3::new(0.1, 0.2, 1.5);
        let c = taxels_to_cop(&r, &layout).unwrap();
        assert_eq!(c.position, layout.positions()[2]);
        assert_eq!(c.active_count, 1);
        // Single taxel at the CoP: M = I, ridge shrinks by 1/(1 + λ²).
        let expected = rot.apply(&r.forces[2]) / (1.0 + 1e-6);
        assert!((c.force - expected).norm() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let layout = flat_patch(2, 1e-2, params(3e-3, 1e-3));
        assert!(matches!(
            taxels_to_cop(&TaxelReading::zeros(3, 0.0), &layout),
            Err(SensorError::DimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn layout_invariants() {
        let p = params(3e-3, 1e-3);
        let two = vec![Vector3::zeros(), Vector3::new(5e-7, 0.0, 0.0)];
        assert!(TaxelLayout::new(two, vec![Rotation::identity(); 2], 2, p).is_err());
        let bad = MappingParams { sigma: 0.0, ..p };
        assert!(TaxelLayout::new(vec![Vector3::zeros()], vec![Rotation::identity()], 2, bad).is_err());
        assert!(TaxelLayout::new(vec![Vector3::zeros()], vec![Rotation::identity()], 3, p).is_err());
        assert!(TaxelLayout::with_normals(
            vec![Vector3::zeros()],
            vec![Rotation::identity()],
            vec![Vector3::new(0.0, 0.0, 2.0)],
            2,
            p
        )
        .is_err());
    }

    #[test]
    fn normal_only_output_is_parallel() {
        let mut p = params(3e-3, 1e-3);
        p.normal_only = true;
        let layout = flat_patch(4, 4.7e-3, p);
        let contact = CopContact {
            force: Vector3::new(0.6, 0.4, 1.5),
            position: Vector3::new(7e-3, 6e-3, 0.0),
            active_count: 0,
        };
        let r = cop_to_taxels(&contact, &layout).unwrap();
        let est = estimate_from_sensor_forces(&r.forces, &layout).unwrap();
        assert!(est.contact.force.cross(&est.normal).norm() < 1e-9 * est.contact.force.norm());
    }
}
