//! Projects arbitrary 3x3 matrices onto SO(3) and checks the backward pass
//! against a finite difference.

use coptact::geometry::{svd_project, svd_project_gradient, UnconstrainedRotationParam};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let p = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let r = svd_project(&UnconstrainedRotationParam(p))?;
        let orth = (r.matrix().transpose() * r.matrix() - Matrix3::identity()).norm();
        println!("det(P) = {:+.3}  det(R) = {:.12}  |RᵀR − I| = {orth:.1e}", p.determinant(), r.matrix().determinant());

        // L = <G, R(P)> has gradient svd_project_gradient(P, G).
        let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let grad = svd_project_gradient(&UnconstrainedRotationParam(p), &g)?;
        let h = 1e-6;
        let mut e = Matrix3::zeros();
        e[(0, 1)] = h;
        let loss = |m: Matrix3<f64>| svd_project(&UnconstrainedRotationParam(m)).map(|r| r.matrix().dot(&g));
        let fd = (loss(p + e)? - loss(p - e)?) / (2.0 * h);
        println!("  dL/dP01 analytic {:+.8}  finite difference {fd:+.8}", grad[(0, 1)]);
    }
    Ok(())
}
