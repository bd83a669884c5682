//! Taxel orientation calibration from static-equilibrium torques.
//!
//! Each taxel frame is learned as an unconstrained 3x3 matrix projected onto
//! SO(3). For every recorded sample the taxel forces are rotated into the
//! sensor frame, reduced to a CoP contact, carried to the base frame through
//! forward kinematics, and mapped to the torques `τ̂ = −Jᵀ f̂` that would hold
//! the finger still. The loss is the mean squared torque mismatch.
//!
//! The CoP position depends only on taxel force norms, which rotations
//! preserve, so the gradient flows solely through the linear force solve.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    geodesic_angle, svd_project, svd_project_gradient, GeometryError, Rotation,
    UnconstrainedRotationParam,
};
use crate::kinematics::{KinematicChain, KinematicsError};
use crate::sensor_model::{estimate_from_sensor_forces, SensorError, TaxelLayout, TaxelReading};
use crate::synthetic::perturb_rotations;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("every sample was skipped (no active taxels)")]
    AllSamplesSkipped,
    #[error("taxel {taxel}: {source}")]
    Projection {
        taxel: usize,
        #[source]
        source: GeometryError,
    },
    #[error("expected {expected} rotation parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("sample {sample}: expected {expected} torques, got {got}")]
    TorqueCount {
        sample: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// One recorded time step.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSample {
    pub reading: TaxelReading,
    pub q: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibDataset {
    pub samples: Vec<CalibSample>,
}

impl CalibDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One unconstrained matrix per taxel.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationParams(pub Vec<UnconstrainedRotationParam>);

impl RotationParams {
    pub fn from_rotations(rotations: &[Rotation]) -> Self {
        RotationParams(rotations.iter().map(|&r| r.into()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn project(&self) -> Result<Vec<Rotation>, CalibError> {
        self.0
            .iter()
            .enumerate()
            .map(|(taxel, p)| svd_project(p).map_err(|source| CalibError::Projection { taxel, source }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMode {
    /// Layout orientations (surface-normal aligned frames).
    Nominal,
    Identity,
    /// Layout orientations perturbed by a seeded random rotation of up to `max_angle` radians.
    Random { max_angle: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub init: InitMode,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            learning_rate: 0.1,
            steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            init: InitMode::Nominal,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<(), CalibError> {
        if !(self.learning_rate > 0.0) {
            return Err(CalibError::Config("learning_rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(CalibError::Config("steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(CalibError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(CalibError::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    /// Dataset loss before each update.
    pub loss_history: Vec<f64>,
    /// Dataset loss at the returned rotations.
    pub final_loss: f64,
    pub rotations: Vec<Rotation>,
    pub skipped_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_geodesic_errors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geodesic_errors: Option<Vec<f64>>,
}

impl CalibReport {
    pub fn median_geodesic_error(&self) -> Option<f64> {
        self.geodesic_errors.as_deref().map(median)
    }

    pub fn median_initial_geodesic_error(&self) -> Option<f64> {
        self.initial_geodesic_errors.as_deref().map(median)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Loss and rotation gradient of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub loss: f64,
    /// `∂loss/∂Rᵢ` per taxel; empty when skipped.
    pub rotation_grad: Vec<Matrix3<f64>>,
    pub skipped: bool,
}

impl SampleEval {
    fn skipped() -> Self {
        SampleEval {
            loss: 0.0,
            rotation_grad: Vec::new(),
            skipped: true,
        }
    }
}

/// Predicted torques for one reading under the given taxel rotations.
/// `None` when the mapping has no contact or fails.
pub fn predicted_torque(
    rotations: &[Rotation],
    reading: &TaxelReading,
    q: &[f64],
    layout: &TaxelLayout,
    chain: &KinematicChain,
) -> Result<Option<Vec<f64>>, CalibError> {
    let forces = reading.to_sensor_frame(rotations)?;
    let est = match estimate_from_sensor_forces(&forces, layout) {
        Ok(est) => est,
        Err(SensorError::DimensionMismatch { expected, got }) => {
            return Err(SensorError::DimensionMismatch { expected, got }.into())
        }
        Err(_) => return Ok(None),
    };
    let frames = chain.joint_frames(q)?;
    let p_base = frames.sensor.transform_point(&est.contact.position);
    let f_base = frames.sensor.transform_vector(&est.contact.force);
    let jac = frames.point_jacobian(&p_base);
    Ok(Some((-(jac.transpose() * f_base)).iter().copied().collect()))
}

fn evaluate_sample(
    rotations: &[Rotation],
    sample: &CalibSample,
    index: usize,
    layout: &TaxelLayout,
    chain: &KinematicChain,
    with_grad: bool,
) -> Result<SampleEval, CalibError> {
    let dof = chain.dof();
    if sample.tau.len() != dof {
        return Err(CalibError::TorqueCount {
            sample: index,
            expected: dof,
            got: sample.tau.len(),
        });
    }
    let forces = sample.reading.to_sensor_frame(rotations)?;
    let est = match estimate_from_sensor_forces(&forces, layout) {
        Ok(est) => est,
        Err(e @ SensorError::DimensionMismatch { .. }) => return Err(e.into()),
        Err(_) => return Ok(SampleEval::skipped()),
    };
    let frames = chain.joint_frames(&sample.q)?;
    let p_base = frames.sensor.transform_point(&est.contact.position);
    let f_base = frames.sensor.transform_vector(&est.contact.force);
    let jac = frames.point_jacobian(&p_base);
    let tau_hat = -(jac.transpose() * f_base);

    let mut loss = 0.0;
    let mut dtau = Vec::with_capacity(dof);
    for (k, &measured) in sample.tau.iter().enumerate() {
        let r = tau_hat[k] - measured;
        loss += r * r;
        dtau.push(2.0 * r / dof as f64);
    }
    loss /= dof as f64;
    if !with_grad {
        return Ok(SampleEval {
            loss,
            rotation_grad: Vec::new(),
            skipped: false,
        });
    }

    // τ̂ = −Jᵀ R_BS f_cop  ⇒  ∂L/∂f_cop = −R_BSᵀ J ∂L/∂τ̂
    let dtau = nalgebra::DVector::from_vec(dtau);
    let df_base: Vector3<f64> = -(&jac * dtau);
    let df_cop = frames.sensor.rotation.transpose().apply(&df_base);
    let mut rotation_grad = vec![Matrix3::zeros(); layout.len()];
    for &i in est.rows() {
        // f_cop depends on Rᵢ through the sensor-frame force Rᵢ fᵢ.
        let df_i = est.force_sensitivity(i).transpose() * df_cop;
        rotation_grad[i] = df_i * sample.reading.forces[i].transpose();
    }
    Ok(SampleEval {
        loss,
        rotation_grad,
        skipped: false,
    })
}

/// Mean squared torque error of one sample; zero when the reading has no contact.
pub fn calib_loss(
    params: &RotationParams,
    sample: &CalibSample,
    layout: &TaxelLayout,
    chain: &KinematicChain,
) -> Result<f64, CalibError> {
    check_params(params, layout)?;
    let rotations = params.project()?;
    Ok(evaluate_sample(&rotations, sample, 0, layout, chain, false)?.loss)
}

/// Dataset loss and gradient with respect to every parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<Matrix3<f64>>,
    pub skipped: usize,
}

/// Mean loss over the dataset (skipped samples count as zero).
pub fn dataset_loss(
    params: &RotationParams,
    dataset: &CalibDataset,
    layout: &TaxelLayout,
    chain: &KinematicChain,
) -> Result<(f64, usize), CalibError> {
    check_params(params, layout)?;
    if dataset.is_empty() {
        return Err(CalibError::EmptyDataset);
    }
    let rotations = params.project()?;
    let evals = evaluate_all(&rotations, dataset, layout, chain, false)?;
    let skipped = evals.iter().filter(|e| e.skipped).count();
    let total: f64 = evals.iter().map(|e| e.loss).sum();
    Ok((total / dataset.len() as f64, skipped))
}

/// Gradient of the dataset-mean loss with respect to each `Pᵢ`.
pub fn calib_loss_gradient(
    params: &RotationParams,
    dataset: &CalibDataset,
    layout: &TaxelLayout,
    chain: &KinematicChain,
) -> Result<BatchGradient, CalibError> {
    check_params(params, layout)?;
    if dataset.is_empty() {
        return Err(CalibError::EmptyDataset);
    }
    let rotations = params.project()?;
    let evals = evaluate_all(&rotations, dataset, layout, chain, true)?;

    // Fixed-order reduction keeps results independent of the thread count.
    let scale = 1.0 / dataset.len() as f64;
    let mut loss = 0.0;
    let mut skipped = 0;
    let mut rotation_grad = vec![Matrix3::zeros(); layout.len()];
    for e in &evals {
        loss += e.loss;
        if e.skipped {
            skipped += 1;
            continue;
        }
        for (acc, g) in rotation_grad.iter_mut().zip(&e.rotation_grad) {
            *acc += g;
        }
    }
    let grad = params
        .0
        .iter()
        .zip(&rotation_grad)
        .enumerate()
        .map(|(taxel, (p, g))| {
            svd_project_gradient(p, &(g * scale)).map_err(|source| CalibError::Projection { taxel, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BatchGradient {
        loss: loss * scale,
        grad,
        skipped,
    })
}

/// Per-sample losses and rotation gradients, in dataset order.
pub fn per_sample_gradients(
    params: &RotationParams,
    dataset: &CalibDataset,
    layout: &TaxelLayout,
    chain: &KinematicChain,
) -> Result<Vec<SampleEval>, CalibError> {
    check_params(params, layout)?;
    let rotations = params.project()?;
    let mut evals = evaluate_all(&rotations, dataset, layout, chain, true)?;
    for e in evals.iter_mut().filter(|e| !e.skipped) {
        for (taxel, (p, g)) in params.0.iter().zip(e.rotation_grad.iter_mut()).enumerate() {
            *g = svd_project_gradient(p, g).map_err(|source| CalibError::Projection { taxel, source })?;
        }
    }
    Ok(evals)
}

fn evaluate_all(
    rotations: &[Rotation],
    dataset: &CalibDataset,
    layout: &TaxelLayout,
    chain: &KinematicChain,
    with_grad: bool,
) -> Result<Vec<SampleEval>, CalibError> {
    dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| evaluate_sample(rotations, s, k, layout, chain, with_grad))
        .collect()
}

fn check_params(params: &RotationParams, layout: &TaxelLayout) -> Result<(), CalibError> {
    if params.len() != layout.len() {
        return Err(CalibError::ParamCount {
            expected: layout.len(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Initial parameters for a calibration run.
pub fn initial_params(layout: &TaxelLayout, config: &CalibConfig) -> RotationParams {
    match config.init {
        InitMode::Nominal => RotationParams::from_rotations(layout.orientations()),
        InitMode::Identity => RotationParams::from_rotations(&vec![Rotation::identity(); layout.len()]),
        InitMode::Random { max_angle } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            RotationParams::from_rotations(&perturb_rotations(layout.orientations(), max_angle, &mut rng))
        }
    }
}

/// Elementwise Adam over a list of 3x3 parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix3<f64>>,
    v: Vec<Matrix3<f64>>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![Matrix3::zeros(); n],
            v: vec![Matrix3::zeros(); n],
        }
    }

    pub fn step(&mut self, params: &mut [UnconstrainedRotationParam], grads: &[Matrix3<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = *m * self.beta1 + g * (1.0 - self.beta1);
            *v = *v * self.beta2 + g.component_mul(g) * (1.0 - self.beta2);
            for k in 0..9 {
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p.0[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Full-batch Adam on the torque-matching loss.
///
/// `ground_truth`, when given, adds per-taxel geodesic errors (before and
/// after) to the report.
pub fn calibrate(
    dataset: &CalibDataset,
    layout: &TaxelLayout,
    chain: &KinematicChain,
    config: &CalibConfig,
    ground_truth: Option<&[Rotation]>,
) -> Result<CalibReport, CalibError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CalibError::EmptyDataset);
    }
    let mut params = initial_params(layout, config);
    let initial_rotations = params.project()?;
    let mut adam = Adam::new(
        params.len(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut loss_history = Vec::with_capacity(config.steps);
    let mut skipped_count = 0;
    for step in 0..config.steps {
        let batch = calib_loss_gradient(&params, dataset, layout, chain)?;
        if batch.skipped == dataset.len() {
            return Err(CalibError::AllSamplesSkipped);
        }
        if step == 0 {
            skipped_count = batch.skipped;
        }
        loss_history.push(batch.loss);
        adam.step(&mut params.0, &batch.grad);
    }
    let (final_loss, _) = dataset_loss(&params, dataset, layout, chain)?;
    let rotations = params.project()?;
    let errors = |rots: &[Rotation]| -> Option<Vec<f64>> {
        ground_truth.map(|gt| gt.iter().zip(rots).map(|(a, b)| geodesic_angle(a, b)).collect())
    };
    Ok(CalibReport {
        loss_history,
        final_loss,
        initial_geodesic_errors: errors(&initial_rotations),
        geodesic_errors: errors(&rotations),
        rotations,
        skipped_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::row_major;
    use crate::kinematics::{point_jacobian, JointState};
    use crate::synthetic::{build_benchmark, Benchmark, BenchmarkSpec, NoiseSpec, REFERENCE_Q};

    fn small_benchmark(count: usize, max_perturbation: f64, seed: u64) -> Benchmark {
        let spec = BenchmarkSpec {
            count,
            max_perturbation,
            seed,
            ..BenchmarkSpec::default()
        };
        build_benchmark(&spec, &KinematicChain::reference_finger(), &REFERENCE_Q).unwrap()
    }

    /// Straight-line re-evaluation of the whole pipeline for one sample.
    fn pipeline_loss(rotations: &[Rotation], sample: &CalibSample, layout: &TaxelLayout, chain: &KinematicChain) -> f64 {
        let p = layout.params();
        let forces: Vec<Vector3<f64>> = sample
            .reading
            .forces
            .iter()
            .zip(rotations)
            .map(|(f, r)| r.matrix() * f)
            .collect();
        let active: Vec<usize> = (0..forces.len()).filter(|&i| forces[i].norm() > p.epsilon).collect();
        if active.is_empty() {
            return 0.0;
        }
        let total: f64 = active.iter().map(|&i| forces[i].norm()).sum();
        let pos = active
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + layout.positions()[i] * forces[i].norm())
            / total;
        let mut n = Vector3::zeros();
        for &i in &active {
            n += layout.normals()[i] / (layout.positions()[i] - pos).norm();
        }
        let n = n.normalize();
        let mut h = Matrix3::identity() * p.lambda.powi(2);
        let mut g = Vector3::zeros();
        for &i in &active {
            let d = layout.positions()[i] - pos;
            let w = (-d.norm_squared() / (2.0 * p.sigma * p.sigma)).exp();
            let b = (layout.normals()[i] * w + d.normalize() * (1.0 - w)).normalize();
            let m = (b * n.transpose() + Matrix3::identity() - n * n.transpose()) * w;
            h += m.transpose() * m;
            g += m.transpose() * forces[i];
        }
        let f = h.lu().solve(&g).unwrap();
        let state = JointState::new(sample.q.clone());
        let pose = crate::kinematics::forward_kinematics(chain, &state).unwrap();
        let pb = pose.transform_point(&pos);
        let fb = pose.transform_vector(&f);
        let jac = point_jacobian(chain, &state, &pb).unwrap();
        let tau = -(jac.transpose() * fb);
        tau.iter().zip(&sample.tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau.len() as f64
    }

    fn perturbed_params(rotations: &[Rotation], seed: u64, scale: f64) -> RotationParams {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RotationParams(
            rotations
                .iter()
                .map(|r| {
                    let noise = Matrix3::from_fn(|_, _| rng.random_range(-scale..scale));
                    UnconstrainedRotationParam(r.matrix() + noise)
                })
                .collect(),
        )
    }

    fn finite_difference(params: &RotationParams, dataset: &CalibDataset, layout: &TaxelLayout, chain: &KinematicChain) -> Vec<Matrix3<f64>> {
        let h = 1e-6;
        let mut out = vec![Matrix3::zeros(); params.len()];
        for (i, g) in out.iter_mut().enumerate() {
            for k in 0..9 {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.0[i].0[k] += h;
                minus.0[i].0[k] -= h;
                let lp = dataset_loss(&plus, dataset, layout, chain).unwrap().0;
                let lm = dataset_loss(&minus, dataset, layout, chain).unwrap().0;
                g[k] = (lp - lm) / (2.0 * h);
            }
        }
        out
    }

    fn relative_error(a: &[Matrix3<f64>], b: &[Matrix3<f64>]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y.norm_squared()).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn ground_truth_is_a_stationary_zero() {
        let b = small_benchmark(30, 0.5, 3);
        let params = RotationParams::from_rotations(&b.true_rotations);
        for s in &b.data.dataset.samples {
            assert!(calib_loss(&params, s, &b.cap.layout, &b.chain).unwrap() < 1e-10);
        }
        let g = calib_loss_gradient(&params, &b.data.dataset, &b.cap.layout, &b.chain).unwrap();
        assert!(g.loss < 1e-10);
        let norm: f64 = g.grad.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn idle_sample_has_zero_loss() {
        let b = small_benchmark(1, 0.5, 0);
        let sample = CalibSample {
            reading: TaxelReading::zeros(b.cap.layout.len(), 0.0),
            q: REFERENCE_Q.to_vec(),
            tau: vec![0.0; 4],
        };
        let params = RotationParams::from_rotations(b.cap.layout.orientations());
        assert_eq!(calib_loss(&params, &sample, &b.cap.layout, &b.chain).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_pipeline_reevaluation() {
        let b = small_benchmark(20, 20f64.to_radians(), 5);
        let identity = vec![Rotation::identity(); b.cap.layout.len()];
        let params = RotationParams::from_rotations(&identity);
        let layout = &b.cap.layout;
        for s in &b.data.dataset.samples {
            let got = calib_loss(&params, s, layout, &b.chain).unwrap();
            let expected = pipeline_loss(&identity, s, layout, &b.chain);
            assert!(got > 0.0);
            assert!((got - expected).abs() <= 1e-9 * expected, "{got} vs {expected}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = small_benchmark(12, 0.5, 11);
        let layout = &b.cap.layout;
        for seed in 0..3 {
            let params = perturbed_params(layout.orientations(), seed, 0.2);
            let single = CalibDataset {
                samples: vec![b.data.dataset.samples[seed as usize].clone()],
            };
            for data in [&single, &b.data.dataset] {
                let an = calib_loss_gradient(&params, data, layout, &b.chain).unwrap().grad;
                let fd = finite_difference(&params, data, layout, &b.chain);
                let err = relative_error(&an, &fd);
                assert!(err < 1e-4, "relative error {err}");
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let b = small_benchmark(25, 0.5, 2);
        let params = perturbed_params(b.cap.layout.orientations(), 7, 0.1);
        let batch = calib_loss_gradient(&params, &b.data.dataset, &b.cap.layout, &b.chain).unwrap();
        let each = per_sample_gradients(&params, &b.data.dataset, &b.cap.layout, &b.chain).unwrap();
        let n = each.len() as f64;
        for t in 0..b.cap.layout.len() {
            let mean = each
                .iter()
                .filter(|e| !e.skipped)
                .fold(Matrix3::zeros(), |acc, e| acc + e.rotation_grad[t])
                / n;
            assert!((mean - batch.grad[t]).abs().max() < 1e-12);
        }
        let mean_loss = each.iter().map(|e| e.loss).sum::<f64>() / n;
        assert!((mean_loss - batch.loss).abs() < 1e-12);
    }

    #[test]
    fn identity_truth_stays_at_zero() {
        let b = small_benchmark(20, 0.0, 4);
        let spec = BenchmarkSpec {
            count: 20,
            max_perturbation: 0.0,
            ..BenchmarkSpec::default()
        };
        let cap = crate::synthetic::generate_cap_layout(&spec.cap).unwrap();
        let identity = vec![Rotation::identity(); cap.layout.len()];
        let layout = cap.with_orientations(identity).unwrap();
        let data = crate::synthetic::synthesize_dataset(
            &b.contacts,
            &layout,
            &b.chain,
            &REFERENCE_Q,
            &NoiseSpec::default(),
            spec.torque_reference,
        )
        .unwrap();
        let config = CalibConfig {
            init: InitMode::Identity,
            steps: 5,
            ..CalibConfig::default()
        };
        let report = calibrate(&data.dataset, &cap.layout, &b.chain, &config, None).unwrap();
        assert!(report.loss_history.iter().all(|&l| l < 1e-10));
        assert!(report.final_loss < 1e-10);
    }

    #[test]
    fn calibrate_errors_and_lengths() {
        let b = small_benchmark(10, 0.3, 1);
        let layout = &b.cap.layout;
        let one = CalibConfig {
            steps: 1,
            ..CalibConfig::default()
        };
        let r = calibrate(&b.data.dataset, layout, &b.chain, &one, Some(&b.true_rotations)).unwrap();
        assert_eq!(r.loss_history.len(), 1);
        assert_eq!(r.geodesic_errors.as_ref().unwrap().len(), layout.len());
        for rot in &r.rotations {
            let m = rot.matrix();
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }

        assert_eq!(
            calibrate(&CalibDataset::default(), layout, &b.chain, &one, None),
            Err(CalibError::EmptyDataset)
        );
        let idle = CalibDataset {
            samples: vec![
                CalibSample {
                    reading: TaxelReading::zeros(layout.len(), 0.0),
                    q: REFERENCE_Q.to_vec(),
                    tau: vec![0.0; 4],
                };
                3
            ],
        };
        assert_eq!(calibrate(&idle, layout, &b.chain, &one, None), Err(CalibError::AllSamplesSkipped));
        let bad = CalibConfig {
            learning_rate: 0.0,
            ..CalibConfig::default()
        };
        assert!(matches!(calibrate(&b.data.dataset, layout, &b.chain, &bad, None), Err(CalibError::Config(_))));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let b = small_benchmark(40, 0.5, 9);
        let config = CalibConfig {
            steps: 5,
            ..CalibConfig::default()
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| calibrate(&b.data.dataset, &b.cap.layout, &b.chain, &config, None).unwrap())
        };
        let a = run(1);
        let c = run(4);
        assert_eq!(a.loss_history, c.loss_history);
        let bits = |r: &CalibReport| -> Vec<[f64; 9]> { r.rotations.iter().map(|m| row_major(m.matrix())).collect() };
        assert_eq!(bits(&a), bits(&c));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![UnconstrainedRotationParam(Matrix3::identity())];
        let mut adam = Adam::new(1, 0.1, 0.9, 0.999, 1e-8);
        let g = Matrix3::from_fn(|r, c| if r == c { 2.0 } else { -0.5 });
        adam.step(&mut p, &[g]);
        let moved = p[0].0 - Matrix3::identity();
        for k in 0..9 {
            assert!((moved[k] + 0.1 * g[k].signum()).abs() < 1e-8);
        }
    }
}
