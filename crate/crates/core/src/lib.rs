pub mod geometry;
pub mod sensor_model;
pub mod kinematics;
pub mod calibration;
pub mod synthetic;
pub mod sysid;
pub mod probe;
pub mod io;
pub mod cli;
