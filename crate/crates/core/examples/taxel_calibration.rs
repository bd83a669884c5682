//! Recovers taxel frame rotations from joint torques on a synthetic
//! benchmark whose true frames are perturbed up to 30 degrees.

use coptact::calibration::{calibrate, CalibConfig};
use coptact::kinematics::KinematicChain;
use coptact::synthetic::{build_benchmark, BenchmarkSpec, REFERENCE_Q};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let chain = KinematicChain::reference_finger();
    let bench = build_benchmark(&BenchmarkSpec { seed: 2, ..BenchmarkSpec::default() }, &chain, &REFERENCE_Q)?;
    let report = calibrate(
        &bench.data.dataset,
        &bench.cap.layout,
        &chain,
        &CalibConfig::default(),
        Some(&bench.true_rotations),
    )?;
    for (k, loss) in report.loss_history.iter().enumerate().step_by(10) {
        println!("step {k:>3}: loss {loss:.3e}");
    }
    println!("final loss {:.3e}", report.final_loss);
    println!(
        "median geodesic error {:.2}° -> {:.3}°",
        report.median_initial_geodesic_error().unwrap().to_degrees(),
        report.median_geodesic_error().unwrap().to_degrees()
    );
    Ok(())
}
