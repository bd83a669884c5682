//! Actuator identification: a PD-driven joint plant, probe signals, and a
//! Bayesian-optimization search for the plant parameters that best reproduce
//! recorded trajectories.

mod gp;
mod search;

pub use gp::{expected_improvement, GaussianProcess, Matern52};
pub use search::{
    bayes_opt_identify, identification_loss, random_search, Evaluation, ParamBounds, SearchMode,
    SysidConfig, SysidResult, UNSTABLE_PENALTY,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SysidError {
    #[error("invalid actuator parameters: {0}")]
    InvalidParams(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("time step {dt} too large for sample rate {sample_rate} Hz")]
    InvalidDt { dt: f64, sample_rate: f64 },
    #[error("simulation diverged at t = {time}")]
    Unstable { time: f64 },
    #[error("trajectories are sampled on different time grids")]
    GridMismatch,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("every evaluation diverged")]
    AllUnstable,
    #[error("Gaussian-process kernel matrix is not positive definite")]
    Kernel,
}

/// Joint plant `I q̈ = Kp (q* − q) − Kd q̇ − b q̇ − c·tanh(q̇ / 1e-3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorParams {
    /// Kp (N·m/rad)
    pub stiffness: f64,
    /// Kd (N·m·s/rad)
    pub damping: f64,
    /// N·m
    pub coulomb_friction: f64,
    /// N·m·s/rad
    pub viscous_friction: f64,
    /// kg·m²
    pub inertia: f64,
}

/// Velocity scale of the tanh-smoothed Coulomb term (rad/s).
pub const COULOMB_SMOOTHING: f64 = 1e-3;

impl Default for ActuatorParams {
    /// A small finger joint, slightly underdamped.
    fn default() -> Self {
        ActuatorParams {
            stiffness: 2.0,
            damping: 0.012,
            coulomb_friction: 0.004,
            viscous_friction: 0.004,
            inertia: 1e-4,
        }
    }
}

impl ActuatorParams {
    pub const DIM: usize = 5;

    pub fn validate(&self) -> Result<(), SysidError> {
        let v = self.to_array();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SysidError::InvalidParams("non-finite value".into()));
        }
        if v.iter().any(|&x| x < 0.0) {
            return Err(SysidError::InvalidParams("all parameters must be non-negative".into()));
        }
        if !(self.inertia > 0.0) {
            return Err(SysidError::InvalidParams("inertia must be positive".into()));
        }
        Ok(())
    }

    /// `[stiffness, damping, coulomb_friction, viscous_friction, inertia]`
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.stiffness,
            self.damping,
            self.coulomb_friction,
            self.viscous_friction,
            self.inertia,
        ]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        ActuatorParams {
            stiffness: v[0],
            damping: v[1],
            coulomb_friction: v[2],
            viscous_friction: v[3],
            inertia: v[4],
        }
    }

    pub const NAMES: [&'static str; 5] = [
        "stiffness",
        "damping",
        "coulomb_friction",
        "viscous_friction",
        "inertia",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Step,
    Ramp,
    Chirp,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Step => "step",
            ProbeKind::Ramp => "ramp",
            ProbeKind::Chirp => "chirp",
        }
    }
}

/// Position-target signal fed to the joint, starting from rest at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSequence {
    pub kind: ProbeKind,
    /// s
    pub duration: f64,
    /// rad
    pub amplitude: f64,
    /// Chirp sweep start and end frequencies (Hz).
    #[serde(default = "default_f_start")]
    pub f_start: f64,
    #[serde(default = "default_f_end")]
    pub f_end: f64,
    /// Hz
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    /// Initial joint angle and target baseline (rad).
    #[serde(default)]
    pub offset: f64,
}

fn default_f_start() -> f64 {
    0.2
}
fn default_f_end() -> f64 {
    8.0
}
fn default_sample_rate() -> f64 {
    100.0
}

impl ProbeSequence {
    pub fn new(kind: ProbeKind, duration: f64, amplitude: f64) -> Self {
        ProbeSequence {
            kind,
            duration,
            amplitude,
            f_start: default_f_start(),
            f_end: default_f_end(),
            sample_rate: default_sample_rate(),
            offset: 0.0,
        }
    }

    /// One step, one ramp and one chirp of 2 s at 0.4 rad.
    pub fn standard_suite() -> Vec<ProbeSequence> {
        vec![
            ProbeSequence::new(ProbeKind::Step, 2.0, 0.4),
            ProbeSequence::new(ProbeKind::Ramp, 2.0, 0.4),
            ProbeSequence::new(ProbeKind::Chirp, 2.0, 0.4),
        ]
    }

    pub fn validate(&self) -> Result<(), SysidError> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(SysidError::InvalidProbe("duration must be positive".into()));
        }
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(SysidError::InvalidProbe("sample_rate must be positive".into()));
        }
        if !self.amplitude.is_finite() || !self.offset.is_finite() {
            return Err(SysidError::InvalidProbe("amplitude and offset must be finite".into()));
        }
        if self.kind == ProbeKind::Chirp && !(self.f_start >= 0.0 && self.f_end >= 0.0) {
            return Err(SysidError::InvalidProbe("chirp frequencies must be non-negative".into()));
        }
        Ok(())
    }

    /// Target angle at time `t`.
    pub fn target(&self, t: f64) -> f64 {
        let a = self.amplitude;
        let shape = match self.kind {
            ProbeKind::Step => {
                if t > 0.0 {
                    a
                } else {
                    0.0
                }
            }
            // Ramp-and-hold: the hold exposes the settling transient.
            ProbeKind::Ramp => a * (4.0 * t / self.duration).clamp(0.0, 1.0),
            ProbeKind::Chirp => {
                // Linear sweep: phase 2π(f₀t + (f₁ − f₀)t²/2T).
                let k = (self.f_end - self.f_start) / self.duration;
                let phase = 2.0 * std::f64::consts::PI * (self.f_start * t + 0.5 * k * t * t);
                a * phase.sin()
            }
        };
        self.offset + shape
    }

    /// Sample times `k / rate` covering `[0, duration]`.
    pub fn times(&self) -> Vec<f64> {
        let n = (self.duration * self.sample_rate + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 / self.sample_rate).collect()
    }
}

/// Sampled joint response to a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub target: Vec<f64>,
    pub measured: Vec<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, target: Vec<f64>, measured: Vec<f64>) -> Result<Self, SysidError> {
        if times.len() != target.len() || times.len() != measured.len() {
            return Err(SysidError::InvalidTrajectory("column lengths differ".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SysidError::InvalidTrajectory("times must be strictly increasing".into()));
        }
        Ok(Trajectory {
            times,
            target,
            measured,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Integrates the joint with semi-implicit Euler: explicit spring force,
/// implicit velocity-dependent forces (damping and smoothed Coulomb friction,
/// whose tanh slope is far too stiff for an explicit update), then
/// `q ← q + h q̇`. Each sample interval is split into substeps of at most `dt`.
pub fn simulate_actuator(
    params: &ActuatorParams,
    probe: &ProbeSequence,
    dt: f64,
) -> Result<Trajectory, SysidError> {
    params.validate()?;
    probe.validate()?;
    let interval = 1.0 / probe.sample_rate;
    if !(dt > 0.0) || dt > 0.5 * interval * (1.0 + 1e-12) {
        return Err(SysidError::InvalidDt {
            dt,
            sample_rate: probe.sample_rate,
        });
    }
    let substeps = (interval / dt - 1e-9).ceil().max(1.0) as usize;
    let h = interval / substeps as f64;
    let limit = 10.0 * probe.amplitude.abs();

    let times = probe.times();
    let mut target = Vec::with_capacity(times.len());
    let mut measured = Vec::with_capacity(times.len());
    let mut q = probe.offset;
    let mut v = 0.0;
    for (k, &t) in times.iter().enumerate() {
        target.push(probe.target(t));
        measured.push(q);
        if k + 1 == times.len() {
            break;
        }
        for s in 0..substeps {
            let ts = t + s as f64 * h;
            let spring = params.stiffness * (probe.target(ts) - q);
            v = implicit_velocity(params, v, spring, h);
            q += h * v;
            if !q.is_finite() || (q - probe.offset).abs() > limit.max(1e-12) {
                return Err(SysidError::Unstable { time: ts + h });
            }
        }
    }
    Trajectory::new(times, target, measured)
}

/// Solves `I (v − v₀)/h = F − (Kd + b) v − c·tanh(v/δ)` for `v`. The left
/// side minus the right is strictly increasing in `v`, and the tanh term
/// bounds the root to a bracket; Newton steps are clipped to it.
fn implicit_velocity(p: &ActuatorParams, v0: f64, force: f64, h: f64) -> f64 {
    let a = p.inertia / h + p.damping + p.viscous_friction;
    let rhs = p.inertia / h * v0 + force;
    let c = p.coulomb_friction;
    if c == 0.0 {
        return rhs / a;
    }
    let g = |v: f64| a * v + c * (v / COULOMB_SMOOTHING).tanh() - rhs;
    let (mut lo, mut hi) = ((rhs - c) / a, (rhs + c) / a);
    let mut v = rhs / a;
    for _ in 0..60 {
        let gv = g(v);
        if gv == 0.0 {
            return v;
        }
        if gv > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let th = (v / COULOMB_SMOOTHING).tanh();
        let slope = a + c * (1.0 - th * th) / COULOMB_SMOOTHING;
        let next = v - gv / slope;
        v = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * (1.0 + v.abs()) {
            break;
        }
    }
    v
}

/// Mean squared difference of the measured angles of two trajectories on the
/// same time grid.
pub fn trajectory_mse(a: &Trajectory, b: &Trajectory) -> Result<f64, SysidError> {
    if a.times.len() != b.times.len()
        || a.times
            .iter()
            .zip(&b.times)
            .any(|(x, y)| (x - y).abs() > 1e-9 * (1.0 + x.abs()))
    {
        return Err(SysidError::GridMismatch);
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .measured
        .iter()
        .zip(&b.measured)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_stays_put() {
        let mut probe = ProbeSequence::new(ProbeKind::Step, 1.0, 0.0);
        probe.offset = 0.3;
        let t = simulate_actuator(&ActuatorParams::default(), &probe, 1e-3).unwrap();
        assert!(t.measured.iter().all(|&q| q == 0.3));
    }

    #[test]
    fn undamped_step_oscillates_at_natural_frequency() {
        let p = ActuatorParams {
            stiffness: 2.0,
            damping: 0.0,
            coulomb_friction: 0.0,
            viscous_friction: 0.0,
            inertia: 1e-3,
        };
        let mut probe = ProbeSequence::new(ProbeKind::Step, 3.0, 0.2);
        probe.sample_rate = 2000.0;
        let t = simulate_actuator(&p, &probe, 1e-5).unwrap();
        // Upward zero crossings of q − q*, linearly interpolated.
        let e: Vec<f64> = t.measured.iter().zip(&t.target).map(|(q, r)| q - r).collect();
        let mut crossings = Vec::new();
        for k in 1..e.len() {
            if e[k - 1] < 0.0 && e[k] >= 0.0 {
                let frac = -e[k - 1] / (e[k] - e[k - 1]);
                crossings.push(t.times[k - 1] + frac * (t.times[k] - t.times[k - 1]));
            }
        }
        let periods = (crossings.len() - 1) as f64;
        let measured = periods / (crossings.last().unwrap() - crossings[0]);
        let expected = (p.stiffness / p.inertia).sqrt() / (2.0 * std::f64::consts::PI);
        assert!((measured / expected - 1.0).abs() < 0.02, "{measured} vs {expected}");
    }

    #[test]
    fn overdamped_step_approaches_monotonically() {
        let p = ActuatorParams {
            damping: 0.5,
            ..ActuatorParams::default()
        };
        let probe = ProbeSequence::new(ProbeKind::Step, 2.0, 0.4);
        let t = simulate_actuator(&p, &probe, 1e-3).unwrap();
        assert!(t.measured.windows(2).all(|w| w[1] >= w[0]));
        assert!(t.measured.iter().all(|&q| q <= 0.4));
    }

    #[test]
    fn coulomb_friction_is_stable_at_the_default_step() {
        let p = ActuatorParams {
            coulomb_friction: 0.05,
            ..ActuatorParams::default()
        };
        for probe in ProbeSequence::standard_suite() {
            let t = simulate_actuator(&p, &probe, 1e-3).unwrap();
            assert!(t.measured.iter().all(|q| q.is_finite() && q.abs() < 1.0));
        }
    }

    #[test]
    fn stiff_explicit_spring_diverges() {
        let p = ActuatorParams {
            stiffness: 1e4,
            damping: 0.0,
            coulomb_friction: 0.0,
            viscous_friction: 0.0,
            inertia: 1e-4,
        };
        let probe = ProbeSequence::new(ProbeKind::Step, 1.0, 0.1);
        assert!(matches!(simulate_actuator(&p, &probe, 1e-3), Err(SysidError::Unstable { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let probe = ProbeSequence::new(ProbeKind::Ramp, 1.0, 0.1);
        assert!(matches!(
            simulate_actuator(&ActuatorParams::default(), &probe, 0.01),
            Err(SysidError::InvalidDt { .. })
        ));
        let neg = ActuatorParams {
            stiffness: -1.0,
            ..ActuatorParams::default()
        };
        assert!(simulate_actuator(&neg, &probe, 1e-3).is_err());
        let zero_i = ActuatorParams {
            inertia: 0.0,
            ..ActuatorParams::default()
        };
        assert!(zero_i.validate().is_err());
        let bad = ProbeSequence::new(ProbeKind::Step, 0.0, 0.1);
        assert!(bad.validate().is_err());
        assert!(Trajectory::new(vec![0.0, 0.0], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn mse_cases() {
        let probe = ProbeSequence::new(ProbeKind::Chirp, 1.0, 0.2);
        let a = simulate_actuator(&ActuatorParams::default(), &probe, 1e-3).unwrap();
        assert_eq!(trajectory_mse(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.measured.iter_mut().for_each(|q| *q += 0.25);
        assert!((trajectory_mse(&a, &b).unwrap() - 0.0625).abs() < 1e-15);

        let c = simulate_actuator(
            &ActuatorParams {
                stiffness: 1.0,
                ..ActuatorParams::default()
            },
            &probe,
            1e-3,
        )
        .unwrap();
        let mut sum = 0.0;
        for k in 0..a.len() {
            let d = a.measured[k] - c.measured[k];
            sum += d * d;
        }
        assert!((trajectory_mse(&a, &c).unwrap() - sum / a.len() as f64).abs() < 1e-15);

        let mut shifted = a.clone();
        shifted.times.iter_mut().for_each(|t| *t += 0.5);
        assert_eq!(trajectory_mse(&a, &shifted), Err(SysidError::GridMismatch));
    }

    #[test]
    fn probe_signals() {
        let step = ProbeSequence::new(ProbeKind::Step, 1.0, 0.3);
        assert_eq!(step.target(0.0), 0.0);
        assert_eq!(step.target(0.01), 0.3);
        let ramp = ProbeSequence::new(ProbeKind::Ramp, 2.0, 0.4);
        assert!((ramp.target(0.25) - 0.2).abs() < 1e-15);
        assert_eq!(ramp.target(1.5), 0.4);
        assert_eq!(ramp.times().len(), 201);
        let chirp = ProbeSequence::new(ProbeKind::Chirp, 2.0, 0.4);
        assert_eq!(chirp.target(0.0), 0.0);
    }
}
