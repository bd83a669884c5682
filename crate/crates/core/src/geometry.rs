//! Frame algebra and rotation representations.
//!
//! Rotations are learned as unconstrained 3x3 matrices and mapped to the
//! nearest proper rotation with a 3x3 SVD built on the symmetric
//! eigen-decomposition of `PᵀP`. The backward pass through that projection
//! is [`svd_project_gradient`].

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Smallest singular value accepted by the projection.
pub const RANK_TOLERANCE: f64 = 1e-12;
/// Singular-value gap below which the projection gradient is undefined.
pub const DEGENERATE_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("parameter matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),
    #[error("singular values coincide with negative determinant; projection gradient undefined")]
    DegenerateSingularValues,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not a rotation (orthogonality error {orthogonality:e}, det {det})")]
    NotARotation { orthogonality: f64, det: f64 },
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Checks `mᵀm = I` and `det m = 1` to within `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let orthogonality = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if orthogonality > tol || (det - 1.0).abs() > tol {
            return Err(GeometryError::NotARotation { orthogonality, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix without checking; callers guarantee it is in SO(3).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rodrigues formula. `axis` need not be normalized; a zero axis gives identity.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let k = axis / n;
        let kx = skew(&k);
        Rotation(Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos()))
    }

    /// Rotation vector (axis times angle).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        row_major(&self.0)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 9]>::deserialize(d)?;
        Rotation::from_matrix(from_row_major(&a), 1e-6).map_err(serde::de::Error::custom)
    }
}

pub fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

pub fn from_row_major(a: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(a)
}

/// Cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// A rotation followed by a translation: `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.apply(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(v)
    }
}

/// Arbitrary 3x3 matrix standing in for a rotation during optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnconstrainedRotationParam(pub Matrix3<f64>);

impl From<Rotation> for UnconstrainedRotationParam {
    fn from(r: Rotation) -> Self {
        UnconstrainedRotationParam(*r.matrix())
    }
}

/// `P = U diag(s) Vᵀ` with `U, V ∈ SO(3)` and the sign of `det P` carried by `s[2]`.
#[derive(Debug, Clone, Copy)]
pub struct SignedSvd {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

/// Signed SVD of a 3x3 matrix via the eigen-decomposition of `PᵀP`.
///
/// The right basis comes from the eigenvectors (sorted by decreasing
/// eigenvalue). The first two left vectors are `P vᵢ / σᵢ`, re-orthonormalized,
/// and the third is their cross product, so `U` is always exactly orthonormal
/// with `det U = 1`. The third singular value is then read back as `u₃ᵀ P v₃`
/// and is negative when `det P < 0`.
pub fn signed_svd(p: &Matrix3<f64>) -> Result<SignedSvd, GeometryError> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let scale = p.amax();
    if scale == 0.0 {
        return Err(GeometryError::RankDeficient(0.0));
    }
    // Work on a unit-scale copy so that PᵀP neither overflows nor underflows.
    let pn = p / scale;
    let eig = SymmetricEigen::new(pn.transpose() * pn);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut v = Matrix3::zeros();
    for (col, &k) in order.iter().enumerate() {
        v.set_column(col, &eig.eigenvectors.column(k));
    }
    if v.determinant() < 0.0 {
        v.set_column(2, &(-v.column(2)));
    }

    let sigma_mid = eig.eigenvalues[order[1]].max(0.0).sqrt() * scale;
    if sigma_mid < RANK_TOLERANCE {
        return Err(GeometryError::RankDeficient(sigma_mid));
    }

    let v1: Vector3<f64> = v.column(0).into();
    let v2: Vector3<f64> = v.column(1).into();
    let v3: Vector3<f64> = v.column(2).into();
    let u1 = (pn * v1).normalize();
    let w2 = pn * v2;
    let u2 = (w2 - u1 * u1.dot(&w2)).normalize();
    let u3 = u1.cross(&u2);
    let u = Matrix3::from_columns(&[u1, u2, u3]);
    let s = Vector3::new(
        u1.dot(&(p * v1)),
        u2.dot(&(p * v2)),
        u3.dot(&(p * v3)),
    );
    // The smallest singular value is read from u₃ᵀPv₃, which is accurate far
    // below the resolution of the eigenvalues of PᵀP.
    if s[2].abs() < RANK_TOLERANCE {
        return Err(GeometryError::RankDeficient(s[2].abs()));
    }
    Ok(SignedSvd { u, s, v })
}

/// Nearest rotation in Frobenius norm: `U diag(1, 1, det(UVᵀ)) Vᵀ`.
pub fn svd_project(p: &UnconstrainedRotationParam) -> Result<Rotation, GeometryError> {
    let svd = signed_svd(&p.0)?;
    Ok(Rotation(svd.u * svd.v.transpose()))
}

/// Backpropagates `∂L/∂R` through [`svd_project`] to `∂L/∂P`.
///
/// With `R = U Vᵀ` and `M = Uᵀ G V`, the result is `U Z Vᵀ` where
/// `Z_ij = (M_ij − M_ji) / (s_i + s_j)` off the diagonal and zero on it.
pub fn svd_project_gradient(
    p: &UnconstrainedRotationParam,
    upstream: &Matrix3<f64>,
) -> Result<Matrix3<f64>, GeometryError> {
    let svd = signed_svd(&p.0)?;
    let s = svd.s;
    if s[2] < 0.0 && (s[1] + s[2]).abs() < DEGENERATE_GAP * s[0].abs().max(1.0) {
        return Err(GeometryError::DegenerateSingularValues);
    }
    let m = svd.u.transpose() * upstream * svd.v;
    let mut z = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let denom = s[i] + s[j];
            let denom = if denom.abs() < 1e-12 {
                1e-12f64.copysign(denom)
            } else {
                denom
            };
            z[(i, j)] = (m[(i, j)] - m[(j, i)]) / denom;
        }
    }
    Ok(svd.u * z * svd.v.transpose())
}

/// Geodesic distance on SO(3) in radians, in `[0, π]`.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.matrix().transpose() * b.matrix();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near 0 and π; atan2 of the axis-vector norm does not.
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = axis.norm() / 2.0;
    if c.abs() < 0.9 {
        c.acos()
    } else {
        sin.atan2(c)
    }
}
