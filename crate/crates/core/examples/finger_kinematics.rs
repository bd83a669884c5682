//! Forward kinematics, the point Jacobian and static equilibrium torques of
//! the reference finger for a fingertip push.

use coptact::kinematics::{equilibrium_torque, forward_kinematics, point_jacobian, JointState, KinematicChain};
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let chain = KinematicChain::reference_finger();
    let q = JointState::new(vec![0.1, 0.5, 0.6, 0.4]);
    let sensor = forward_kinematics(&chain, &q)?;
    println!("sensor origin in base frame: {:.4?}", sensor.translation.as_slice());

    let contact = sensor.transform_point(&Vector3::new(0.0, 0.0, 0.01));
    let jac = point_jacobian(&chain, &q, &contact)?;
    println!("point Jacobian:\n{jac:.4}");

    let push = sensor.transform_vector(&Vector3::new(0.0, 0.0, -1.0));
    let tau = equilibrium_torque(&jac, &push);
    println!("torques holding a 1 N push: {:.5?}", tau.as_slice());
    Ok(())
}
