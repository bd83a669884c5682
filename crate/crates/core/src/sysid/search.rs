//! Box-bounded search over actuator parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::gp::{expected_improvement, GaussianProcess, Matern52};
use super::{simulate_actuator, trajectory_mse, ActuatorParams, ProbeSequence, SysidError, Trajectory};

/// Loss recorded for a candidate whose simulation diverged.
pub const UNSTABLE_PENALTY: f64 = 1e6;

/// Lengthscale grid (unit-cube units) searched when fitting the surrogate.
const LENGTHSCALES: [f64; 8] = [0.03, 0.06, 0.12, 0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBounds {
    pub lower: ActuatorParams,
    pub upper: ActuatorParams,
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            lower: ActuatorParams {
                stiffness: 0.5,
                damping: 0.002,
                coulomb_friction: 0.0,
                viscous_friction: 0.0,
                inertia: 3e-5,
            },
            upper: ActuatorParams {
                stiffness: 5.0,
                damping: 0.05,
                coulomb_friction: 0.02,
                viscous_friction: 0.02,
                inertia: 3e-4,
            },
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<(), SysidError> {
        let bad = |e: SysidError| SysidError::InvalidBounds(e.to_string());
        self.lower.validate().map_err(bad)?;
        self.upper.validate().map_err(bad)?;
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        for k in 0..ActuatorParams::DIM {
            if lo[k] > hi[k] {
                return Err(SysidError::InvalidBounds(format!(
                    "{}: lower {} exceeds upper {}",
                    ActuatorParams::NAMES[k],
                    lo[k],
                    hi[k]
                )));
            }
        }
        Ok(())
    }

    /// Maps a point of the unit cube into the box.
    pub fn denormalize(&self, x: &[f64]) -> ActuatorParams {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        let mut v = [0.0; 5];
        for k in 0..5 {
            v[k] = (lo[k] + x[k].clamp(0.0, 1.0) * (hi[k] - lo[k])).clamp(lo[k], hi[k]);
        }
        ActuatorParams::from_array(v)
    }

    pub fn contains(&self, p: &ActuatorParams) -> bool {
        let (lo, hi, v) = (self.lower.to_array(), self.upper.to_array(), p.to_array());
        (0..5).all(|k| v[k] >= lo[k] && v[k] <= hi[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Bayes,
    /// Uniform random sampling of the whole budget.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    /// Total number of plant evaluations.
    pub budget: usize,
    /// Latin-hypercube points before the surrogate takes over; `2 · dim` when unset.
    pub initial_points: Option<usize>,
    /// Integration step (s).
    pub dt: f64,
    /// Uniform candidates scored per acquisition round.
    pub candidates: usize,
    /// Best candidates refined by local random search.
    pub starts: usize,
    pub local_steps: usize,
    /// Expected-improvement margin, in standardized log-loss units.
    pub xi: f64,
    /// Observation noise variance of the surrogate, in standardized units.
    pub noise: f64,
    /// Per-probe loss weights; equal when unset.
    pub probe_weights: Option<Vec<f64>>,
    pub mode: SearchMode,
    pub seed: u64,
}

impl Default for SysidConfig {
    fn default() -> Self {
        SysidConfig {
            budget: 100,
            initial_points: None,
            dt: 1e-3,
            candidates: 2000,
            starts: 8,
            local_steps: 60,
            xi: 0.01,
            noise: 1e-6,
            probe_weights: None,
            mode: SearchMode::Bayes,
            seed: 0,
        }
    }
}

impl SysidConfig {
    pub fn initial_count(&self) -> usize {
        self.initial_points.unwrap_or(2 * ActuatorParams::DIM)
    }

    pub fn validate(&self, probes: usize) -> Result<(), SysidError> {
        let bad = |m: &str| Err(SysidError::InvalidConfig(m.into()));
        if self.mode == SearchMode::Bayes && (self.initial_count() == 0 || self.budget < self.initial_count()) {
            return bad("budget must cover at least the initial design (default 2 · dim points)");
        }
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.candidates == 0 || self.starts == 0 || self.starts > self.candidates {
            return bad("need 1 <= starts <= candidates");
        }
        if !(self.noise > 0.0) || !(self.xi >= 0.0) {
            return bad("noise must be positive and xi non-negative");
        }
        if let Some(w) = &self.probe_weights {
            if w.len() != probes || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad("probe_weights must be one non-negative weight per probe with a positive sum");
            }
        }
        Ok(())
    }
}

/// One plant evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub params: ActuatorParams,
    /// Weighted mean trajectory MSE, or [`UNSTABLE_PENALTY`].
    pub mse: f64,
    pub unstable: bool,
    /// Lowest `mse` seen up to and including this evaluation.
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysidResult {
    pub best: ActuatorParams,
    pub best_mse: f64,
    pub history: Vec<Evaluation>,
}

/// Weighted mean over probes of the MSE between simulated and reference
/// trajectories.
pub fn identification_loss(
    params: &ActuatorParams,
    references: &[Trajectory],
    probes: &[ProbeSequence],
    weights: Option<&[f64]>,
    dt: f64,
) -> Result<f64, SysidError> {
    if references.len() != probes.len() || probes.is_empty() {
        return Err(SysidError::InvalidConfig(format!(
            "{} references for {} probes",
            references.len(),
            probes.len()
        )));
    }
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (k, (reference, probe)) in references.iter().zip(probes).enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        let sim = simulate_actuator(params, probe, dt)?;
        total += w * trajectory_mse(&sim, reference)?;
        weight_sum += w;
    }
    Ok(total / weight_sum)
}

struct Recorder<'a> {
    references: &'a [Trajectory],
    probes: &'a [ProbeSequence],
    weights: Option<&'a [f64]>,
    dt: f64,
    bounds: &'a ParamBounds,
    points: Vec<Vec<f64>>,
    history: Vec<Evaluation>,
}

impl Recorder<'_> {
    fn evaluate(&mut self, x: Vec<f64>) -> Result<(), SysidError> {
        let params = self.bounds.denormalize(&x);
        let (mse, unstable) = match identification_loss(&params, self.references, self.probes, self.weights, self.dt) {
            Ok(v) => (v, false),
            Err(SysidError::Unstable { .. }) => (UNSTABLE_PENALTY, true),
            Err(e) => return Err(e),
        };
        let best_so_far = self.history.last().map_or(mse, |e| e.best_so_far.min(mse));
        self.history.push(Evaluation {
            params,
            mse,
            unstable,
            best_so_far,
        });
        self.points.push(x);
        Ok(())
    }

    fn finish(self) -> Result<SysidResult, SysidError> {
        if self.history.iter().all(|e| e.unstable) {
            return Err(SysidError::AllUnstable);
        }
        // First occurrence of the minimum keeps ties deterministic.
        let best = self
            .history
            .iter()
            .filter(|e| !e.unstable)
            .fold(None::<&Evaluation>, |acc, e| match acc {
                Some(b) if b.mse <= e.mse => Some(b),
                _ => Some(e),
            })
            .expect("at least one stable evaluation");
        Ok(SysidResult {
            best: best.params,
            best_mse: best.mse,
            history: self.history,
        })
    }
}

fn latin_hypercube<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    for k in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in pts.iter_mut().zip(strata) {
            p[k] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

fn uniform_point<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

/// Standardized log losses: the losses span orders of magnitude and the
/// surrogate is far better behaved on their logarithm.
fn surrogate_targets(history: &[Evaluation]) -> Vec<f64> {
    let logs: Vec<f64> = history.iter().map(|e| (e.mse + 1e-12).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
    logs.iter().map(|v| (v - mean) / std).collect()
}

/// Lengthscales by marginal likelihood: the best isotropic value on the
/// grid, then one coordinate sweep per dimension.
fn fit_surrogate(points: &[Vec<f64>], y: &[f64], noise: f64) -> Result<GaussianProcess, SysidError> {
    let dim = points[0].len();
    let score = |k: &Matern52| -> Option<(f64, GaussianProcess)> {
        GaussianProcess::fit(k.clone(), noise, points, y)
            .ok()
            .map(|gp| (gp.log_marginal_likelihood(), gp))
    };
    let mut best: Option<(f64, GaussianProcess)> = None;
    for &l in &LENGTHSCALES {
        if let Some((s, gp)) = score(&Matern52::isotropic(dim, l, 1.0)) {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, gp));
            }
        }
    }
    let (mut best_score, mut best_gp) = best.ok_or(SysidError::Kernel)?;
    for k in 0..dim {
        for &l in &LENGTHSCALES {
            let mut kernel = best_gp.kernel().clone();
            if kernel.lengthscales[k] == l {
                continue;
            }
            kernel.lengthscales[k] = l;
            if let Some((s, gp)) = score(&kernel) {
                if s > best_score {
                    best_score = s;
                    best_gp = gp;
                }
            }
        }
    }
    Ok(best_gp)
}

/// Seeded multi-start random search for the expected-improvement maximizer.
///
/// Starts are the best uniform candidates plus the best observed points, so
/// the search can refine around the incumbent as well as explore.
fn maximize_acquisition<R: Rng>(
    gp: &GaussianProcess,
    observed: &[(f64, &Vec<f64>)],
    best: f64,
    config: &SysidConfig,
    dim: usize,
    rng: &mut R,
) -> Vec<f64> {
    let ei = |x: &[f64]| {
        let (m, s) = gp.predict(x);
        expected_improvement(m, s, best, config.xi)
    };
    let mut scored: Vec<(f64, Vec<f64>)> = (0..config.candidates)
        .map(|_| {
            let x = uniform_point(dim, rng);
            (ei(&x), x)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(config.starts);
    let mut incumbents: Vec<&(f64, &Vec<f64>)> = observed.iter().collect();
    incumbents.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, x) in incumbents.into_iter().take(config.starts) {
        scored.push((ei(x), x.to_vec()));
    }
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut winner = scored[0].clone();
    for (mut value, mut x) in scored {
        let mut radius = 0.1;
        for _ in 0..config.local_steps {
            let trial: Vec<f64> = x.iter().map(|v| (v + radius * gauss.sample(rng)).clamp(0.0, 1.0)).collect();
            let t = ei(&trial);
            if t > value {
                value = t;
                x = trial;
            } else {
                radius *= 0.9;
            }
        }
        if value > winner.0 {
            winner = (value, x);
        }
    }
    winner.1
}

/// Bayesian optimization of the identification loss over a parameter box.
///
/// A Latin-hypercube design seeds a Matérn-5/2 surrogate of the standardized
/// log loss; each further point maximizes expected improvement. Diverging
/// simulations are recorded with [`UNSTABLE_PENALTY`]. In random mode the
/// whole budget is drawn uniformly instead.
pub fn bayes_opt_identify(
    references: &[Trajectory],
    probes: &[ProbeSequence],
    bounds: &ParamBounds,
    config: &SysidConfig,
) -> Result<SysidResult, SysidError> {
    bounds.validate()?;
    config.validate(probes.len())?;
    for p in probes {
        p.validate()?;
    }
    let dim = ActuatorParams::DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rec = Recorder {
        references,
        probes,
        weights: config.probe_weights.as_deref(),
        dt: config.dt,
        bounds,
        points: Vec::with_capacity(config.budget),
        history: Vec::with_capacity(config.budget),
    };
    match config.mode {
        SearchMode::Random => {
            for _ in 0..config.budget {
                rec.evaluate(uniform_point(dim, &mut rng))?;
            }
        }
        SearchMode::Bayes => {
            for x in latin_hypercube(config.initial_count(), dim, &mut rng) {
                rec.evaluate(x)?;
            }
            while rec.history.len() < config.budget {
                let y = surrogate_targets(&rec.history);
                let best = y.iter().copied().fold(f64::INFINITY, f64::min);
                let observed: Vec<(f64, &Vec<f64>)> = y.iter().copied().zip(&rec.points).collect();
                let next = match fit_surrogate(&rec.points, &y, config.noise) {
                    Ok(gp) => maximize_acquisition(&gp, &observed, best, config, dim, &mut rng),
                    Err(_) => uniform_point(dim, &mut rng),
                };
                rec.evaluate(next)?;
            }
        }
    }
    rec.finish()
}

/// `budget` uniform samples of the box, the baseline for Bayesian optimization.
pub fn random_search(
    references: &[Trajectory],
    probes: &[ProbeSequence],
    bounds: &ParamBounds,
    budget: usize,
    seed: u64,
) -> Result<SysidResult, SysidError> {
    let config = SysidConfig {
        budget,
        mode: SearchMode::Random,
        seed,
        ..SysidConfig::default()
    };
    bayes_opt_identify(references, probes, bounds, &config)
}
