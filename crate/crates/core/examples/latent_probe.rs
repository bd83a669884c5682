//! Linear probing and cluster tracking on synthetic recurrent-policy latents.

use coptact::probe::{
    linear_latent_set, linear_probe_fit, probe_score, ramped_cluster_set, spearman, temporal_cluster_report,
    LatentSpec, LatentTrajectorySet,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = LatentSpec { trajectories: 40, latent_dim: 64, ..LatentSpec::default() };
    let (set, _) = linear_latent_set(&spec, 0.1);
    let train = LatentTrajectorySet::new(set.trajectories()[..36].to_vec())?;
    let test = LatentTrajectorySet::new(set.trajectories()[36..].to_vec())?;
    let score = probe_score(&linear_probe_fit(&train, 1e-6)?, &test)?;
    for (k, (rmse, r2)) in score.rmse.iter().zip(&score.r2).enumerate() {
        println!("target {k}: rmse {rmse:.4}  r² {:.4}", r2.unwrap_or(f64::NAN));
    }

    let clusters = ramped_cluster_set(&LatentSpec { seed: 3, ..LatentSpec::default() });
    let times: Vec<usize> = (0..100).step_by(11).collect();
    let report = temporal_cluster_report(&clusters, &times, 2)?;
    for s in &report {
        println!("t = {:>2}: silhouette {:+.3} (2 PCs) {:+.3} (full)", s.time, s.sc_pca, s.sc_full);
    }
    let t: Vec<f64> = times.iter().map(|&v| v as f64).collect();
    let sc: Vec<f64> = report.iter().map(|s| s.sc_pca).collect();
    println!("Spearman ρ(time, silhouette) = {:.3}", spearman(&t, &sc));
    Ok(())
}
