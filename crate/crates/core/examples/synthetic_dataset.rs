//! Builds a small noisy calibration dataset and writes it in the on-disk
//! formats read by the `coptact` binary.

use coptact::io::{write_dataset, write_layout};
use coptact::kinematics::KinematicChain;
use coptact::synthetic::{build_benchmark, BenchmarkSpec, NoiseSpec, REFERENCE_Q};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = BenchmarkSpec {
        count: 50,
        noise: NoiseSpec {
            force_scale: 0.02,
            torque_std: 1e-4,
            ..NoiseSpec::default()
        },
        ..BenchmarkSpec::default()
    };
    let chain = KinematicChain::reference_finger();
    let bench = build_benchmark(&spec, &chain, &REFERENCE_Q)?;
    let dir = std::env::temp_dir().join("coptact_synthetic_example");
    write_layout(&dir.join("layout.json"), &bench.cap.layout)?;
    write_dataset(&dir.join("dataset.csv"), &bench.data.dataset, chain.dof(), bench.cap.layout.len())?;
    let first = &bench.data.dataset.samples[0];
    println!("{} samples written to {}", bench.data.dataset.len(), dir.display());
    println!("first sample torques: {:.5?}", first.tau);
    Ok(())
}
