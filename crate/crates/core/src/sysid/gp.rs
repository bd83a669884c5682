//! Gaussian-process regression with a Matérn-5/2 kernel, and expected improvement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::SysidError;

/// `k(r) = s² (1 + √5 r + 5r²/3) exp(−√5 r)` with `r` the lengthscale-scaled distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Matern52 {
    /// One lengthscale per input dimension.
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

impl Matern52 {
    pub fn isotropic(dim: usize, lengthscale: f64, variance: f64) -> Self {
        Matern52 {
            lengthscales: vec![lengthscale; dim],
            variance,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        let s5r = (5.0 * r2).sqrt();
        self.variance * (1.0 + s5r + 5.0 * r2 / 3.0) * (-s5r).exp()
    }
}

/// GP posterior conditioned on observations, with a constant prior mean.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    kernel: Matern52,
    noise: f64,
    inputs: Vec<Vec<f64>>,
    mean: f64,
    centered: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GaussianProcess {
    /// Conditions on `(inputs, values)` with observation noise variance
    /// `noise`. The prior mean is the sample mean of `values`.
    pub fn fit(kernel: Matern52, noise: f64, inputs: &[Vec<f64>], values: &[f64]) -> Result<Self, SysidError> {
        let n = inputs.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel.eval(&inputs[i], &inputs[j]) + if i == j { noise } else { 0.0 }
        });
        let chol = k.cholesky().ok_or(SysidError::Kernel)?;
        let y = DVector::from_iterator(n, values.iter().map(|v| v - mean));
        let alpha = chol.solve(&y);
        Ok(GaussianProcess {
            kernel,
            noise,
            inputs: inputs.to_vec(),
            mean,
            centered: y,
            chol,
            alpha,
        })
    }

    /// Log marginal likelihood of the conditioning data, up to the constant term.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * self.centered.dot(&self.alpha) - log_det
    }

    pub fn kernel(&self) -> &Matern52 {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Posterior mean and standard deviation at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let k = DVector::from_iterator(n, self.inputs.iter().map(|xi| self.kernel.eval(xi, x)));
        let mean = self.mean + k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).unwrap_or_else(|| DVector::zeros(n));
        let var = (self.kernel.variance - v.norm_squared()).max(0.0);
        (mean, var.sqrt())
    }
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement below `best` for a Gaussian prediction, with margin `xi`.
pub fn expected_improvement(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    let gain = best - mean - xi;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / std;
    gain * normal_cdf(z) + std * normal_pdf(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let k = Matern52::isotropic(2, 0.5, 2.0);
        assert_eq!(k.eval(&[0.1, 0.2], &[0.1, 0.2]), 2.0);
        // r = 1: s²(1 + √5 + 5/3) e^{−√5}
        let r1 = k.eval(&[0.0, 0.0], &[0.3, 0.4]);
        let s5 = 5f64.sqrt();
        assert!((r1 - 2.0 * (1.0 + s5 + 5.0 / 3.0) * (-s5).exp()).abs() < 1e-15);
    }

    #[test]
    fn posterior_interpolates_observations() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0, (i * 7 % 12) as f64 / 11.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin() + x[1] * x[1]).collect();
        let gp = GaussianProcess::fit(Matern52::isotropic(2, 0.3, 1.0), 1e-8, &xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, s) = gp.predict(x);
            assert!((m - y).abs() < 1e-6);
            assert!(s < 1e-3);
        }
        let (_, far) = gp.predict(&[5.0, 5.0]);
        assert!((far - 1.0).abs() < 1e-6);
    }

    #[test]
    fn expected_improvement_properties() {
        assert_eq!(expected_improvement(1.0, 0.0, 0.5, 0.0), 0.0);
        assert_eq!(expected_improvement(0.2, 0.0, 0.5, 0.0), 0.3);
        // At mean = best: σ φ(0).
        let ei = expected_improvement(0.0, 2.0, 0.0, 0.0);
        assert!((ei - 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!(expected_improvement(0.0, 1.0, 0.0, 0.0) < expected_improvement(0.0, 2.0, 0.0, 0.0));
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }
}
