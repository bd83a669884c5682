//! Serial revolute chains: forward kinematics, point Jacobians and the
//! static-equilibrium torque map `τ = −Jᵀ f`.

use nalgebra::{DVector, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, RigidTransform, Rotation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("chain has {expected} joints, got {got} values")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("joint {0} axis is not a unit vector")]
    InvalidAxis(usize),
    #[error("non-finite joint value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevoluteJoint {
    /// Fixed transform from the parent link frame to this joint's frame.
    pub offset: RigidTransform,
    /// Rotation axis in the joint frame.
    pub axis: Vector3<f64>,
}

/// Base frame `B` to sensor frame `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainFile", into = "ChainFile")]
pub struct KinematicChain {
    joints: Vec<RevoluteJoint>,
    sensor_offset: RigidTransform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    joints: Vec<RevoluteJoint>,
    sensor_offset: RigidTransform,
}

impl TryFrom<ChainFile> for KinematicChain {
    type Error = KinematicsError;
    fn try_from(f: ChainFile) -> Result<Self, Self::Error> {
        KinematicChain::new(f.joints, f.sensor_offset)
    }
}

impl From<KinematicChain> for ChainFile {
    fn from(c: KinematicChain) -> Self {
        ChainFile {
            joints: c.joints,
            sensor_offset: c.sensor_offset,
        }
    }
}

impl KinematicChain {
    pub fn new(
        joints: Vec<RevoluteJoint>,
        sensor_offset: RigidTransform,
    ) -> Result<Self, KinematicsError> {
        for (i, j) in joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinematicsError::InvalidAxis(i));
            }
        }
        Ok(KinematicChain {
            joints,
            sensor_offset,
        })
    }

    /// Four-joint finger used by the benchmarks: one abduction joint about
    /// `x` followed by three flexion joints about `y`, links along `+z`.
    /// Link lengths are stand-in values.
    pub fn reference_finger() -> Self {
        let j = |t: [f64; 3], axis: Vector3<f64>| RevoluteJoint {
            offset: RigidTransform::from_translation(Vector3::from(t)),
            axis,
        };
        KinematicChain::new(
            vec![
                j([0.0, 0.0, 0.0], Vector3::x()),
                j([0.0, 0.0, 0.0164], Vector3::y()),
                j([0.0, 0.0, 0.0543], Vector3::y()),
                j([0.0, 0.0, 0.0384], Vector3::y()),
            ],
            RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.0437)),
        )
        .expect("reference finger axes are unit")
    }

    pub fn joints(&self) -> &[RevoluteJoint] {
        &self.joints
    }

    pub fn sensor_offset(&self) -> &RigidTransform {
        &self.sensor_offset
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Rigidly re-bases the chain: the new base frame sees every pose mapped by `t`.
    pub fn rebased(&self, t: &RigidTransform) -> Self {
        let mut joints = self.joints.clone();
        if let Some(first) = joints.first_mut() {
            first.offset = t.compose(&first.offset);
            KinematicChain {
                joints,
                sensor_offset: self.sensor_offset,
            }
        } else {
            KinematicChain {
                joints,
                sensor_offset: t.compose(&self.sensor_offset),
            }
        }
    }

    fn check(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite);
        }
        Ok(())
    }

    /// Joint axes and origins expressed in the base frame, plus the sensor pose.
    pub fn joint_frames(&self, q: &[f64]) -> Result<JointFrames, KinematicsError> {
        self.check(q)?;
        let mut pose = RigidTransform::identity();
        let mut axes = Vec::with_capacity(self.dof());
        let mut origins = Vec::with_capacity(self.dof());
        for (joint, &angle) in self.joints.iter().zip(q) {
            pose = pose.compose(&joint.offset);
            axes.push(pose.transform_vector(&joint.axis));
            origins.push(pose.translation);
            let spin = RigidTransform::new(Rotation::from_axis_angle(&joint.axis, angle), Vector3::zeros());
            pose = pose.compose(&spin);
        }
        Ok(JointFrames {
            axes,
            origins,
            sensor: pose.compose(&self.sensor_offset),
        })
    }
}

#[derive(Debug, Clone)]
pub struct JointFrames {
    pub axes: Vec<Vector3<f64>>,
    pub origins: Vec<Vector3<f64>>,
    pub sensor: RigidTransform,
}

impl JointFrames {
    /// Column `j` is `ωⱼ × (p − oⱼ)`.
    pub fn point_jacobian(&self, p_base: &Vector3<f64>) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.axes.len());
        for (j, (w, o)) in self.axes.iter().zip(&self.origins).enumerate() {
            jac.set_column(j, &w.cross(&(p_base - o)));
        }
        jac
    }

    /// `∂(ωⱼ × (p − oⱼ))/∂p = [ωⱼ]ₓ` for every joint.
    pub fn jacobian_position_derivative(&self) -> Vec<nalgebra::Matrix3<f64>> {
        self.axes.iter().map(skew).collect()
    }
}

/// Joint angles and, when measured, joint torques.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    #[serde(default)]
    pub tau: Option<Vec<f64>>,
}

impl JointState {
    pub fn new(q: Vec<f64>) -> Self {
        JointState { q, tau: None }
    }
}

/// Pose of the sensor frame in the base frame.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointState) -> Result<RigidTransform, KinematicsError> {
    Ok(chain.joint_frames(&q.q)?.sensor)
}

/// Position Jacobian of a point rigidly attached to the last link, given in `B`.
pub fn point_jacobian(
    chain: &KinematicChain,
    q: &JointState,
    p_base: &Vector3<f64>,
) -> Result<Matrix3xX<f64>, KinematicsError> {
    Ok(chain.joint_frames(&q.q)?.point_jacobian(p_base))
}

/// Torques that hold static equilibrium against an external force `f`
/// acting on the body at the Jacobian's point: `τ = −Jᵀ f`.
pub fn equilibrium_torque(jacobian: &Matrix3xX<f64>, f: &Vector3<f64>) -> DVector<f64> {
    -(jacobian.transpose() * f)
}

/// `τ = −Jᵀ f + g(q)` with a caller-supplied gravity term.
pub fn equilibrium_torque_with_gravity(
    jacobian: &Matrix3xX<f64>,
    f: &Vector3<f64>,
    gravity: &DVector<f64>,
) -> DVector<f64> {
    equilibrium_torque(jacobian, f) + gravity
}
