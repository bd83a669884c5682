//! Latent-representation analysis: linear probes, PCA and silhouette scores
//! of recurrent-policy latents.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("design matrix is rank deficient; use a positive ridge")]
    SingularDesign,
    #[error("target column {0} is constant; r² is undefined")]
    DegenerateTarget(usize),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("need at least two clusters")]
    SingleCluster,
    #[error("{0}")]
    InvalidInput(String),
}

/// One rollout: a `T × D` latent matrix, a `T × K` target matrix and a label
/// (for example a mass bucket).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub latents: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectorySet {
    trajectories: Vec<LatentTrajectory>,
}

impl LatentTrajectorySet {
    pub fn new(trajectories: Vec<LatentTrajectory>) -> Result<Self, ProbeError> {
        let first = trajectories
            .first()
            .ok_or_else(|| ProbeError::InvalidInput("no trajectories".into()))?;
        let (d, k) = (first.latents.ncols(), first.targets.ncols());
        for tr in &trajectories {
            if tr.latents.ncols() != d {
                return Err(ProbeError::DimensionMismatch {
                    what: "latent dimension",
                    expected: d,
                    got: tr.latents.ncols(),
                });
            }
            if tr.targets.ncols() != k {
                return Err(ProbeError::DimensionMismatch {
                    what: "target dimension",
                    expected: k,
                    got: tr.targets.ncols(),
                });
            }
            if tr.targets.nrows() != tr.latents.nrows() {
                return Err(ProbeError::DimensionMismatch {
                    what: "target rows",
                    expected: tr.latents.nrows(),
                    got: tr.targets.nrows(),
                });
            }
            if tr.latents.iter().chain(tr.targets.iter()).any(|v| !v.is_finite()) {
                return Err(ProbeError::InvalidInput("non-finite entry".into()));
            }
        }
        Ok(LatentTrajectorySet { trajectories })
    }

    pub fn trajectories(&self) -> &[LatentTrajectory] {
        &self.trajectories
    }

    pub fn latent_dim(&self) -> usize {
        self.trajectories[0].latents.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.trajectories[0].targets.ncols()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trajectories.iter().map(|t| t.label).collect()
    }

    /// All time steps of all trajectories stacked row-wise: `(latents, targets)`.
    pub fn stacked(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let rows: usize = self.trajectories.iter().map(|t| t.latents.nrows()).sum();
        let mut x = DMatrix::zeros(rows, self.latent_dim());
        let mut y = DMatrix::zeros(rows, self.target_dim());
        let mut r = 0;
        for t in &self.trajectories {
            let n = t.latents.nrows();
            x.rows_mut(r, n).copy_from(&t.latents);
            y.rows_mut(r, n).copy_from(&t.targets);
            r += n;
        }
        (x, y)
    }

    /// Latents of every trajectory at time index `t`, one row per trajectory.
    pub fn at_time(&self, t: usize) -> Result<DMatrix<f64>, ProbeError> {
        let d = self.latent_dim();
        let mut out = DMatrix::zeros(self.trajectories.len(), d);
        for (i, tr) in self.trajectories.iter().enumerate() {
            if t >= tr.latents.nrows() {
                return Err(ProbeError::InvalidInput(format!(
                    "time index {t} beyond trajectory {i} of length {}",
                    tr.latents.nrows()
                )));
            }
            out.row_mut(i).copy_from(&tr.latents.row(t));
        }
        Ok(out)
    }
}

/// Linear read-out `ŷ = W̃ᵀ [x; 1]`: rows `0..D` weigh the latents, row `D` is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    pub weights: DMatrix<f64>,
}

impl ProbeWeights {
    pub fn latent_dim(&self) -> usize {
        self.weights.nrows() - 1
    }

    pub fn predict(&self, latents: &DMatrix<f64>) -> Result<DMatrix<f64>, ProbeError> {
        let d = self.latent_dim();
        if latents.ncols() != d {
            return Err(ProbeError::DimensionMismatch {
                what: "latent dimension",
                expected: d,
                got: latents.ncols(),
            });
        }
        let w = self.weights.rows(0, d);
        let bias = self.weights.row(d);
        let mut y = latents * w;
        for mut row in y.row_iter_mut() {
            row += &bias;
        }
        Ok(y)
    }
}

/// Relative eigenvalue floor below which a zero-ridge design counts as singular.
const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Ridge regression with an unpenalized bias, solved in closed form on
/// centred data: `(X̃ᵀX̃ + ridge·I) W = X̃ᵀỸ`, `b = ȳ − Wᵀx̄`.
pub fn linear_probe_fit(train: &LatentTrajectorySet, ridge: f64) -> Result<ProbeWeights, ProbeError> {
    if !(ridge >= 0.0) {
        return Err(ProbeError::InvalidInput("ridge must be non-negative".into()));
    }
    let (x, y) = train.stacked();
    let (m, d) = x.shape();
    if m == 0 {
        return Err(ProbeError::InvalidInput("no samples".into()));
    }
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let xc = centred(&x, &x_mean);
    let yc = centred(&y, &y_mean);
    let mut gram = xc.transpose() * &xc;
    if ridge == 0.0 {
        if m <= d {
            return Err(ProbeError::SingularDesign);
        }
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.max();
        if !(eig.eigenvalues.min() > SINGULAR_TOLERANCE * max.max(f64::MIN_POSITIVE)) {
            return Err(ProbeError::SingularDesign);
        }
    }
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * &yc;
    let w = gram
        .cholesky()
        .ok_or(ProbeError::SingularDesign)?
        .solve(&rhs);
    let bias = &y_mean - &x_mean * &w;
    let mut weights = DMatrix::zeros(d + 1, y.ncols());
    weights.rows_mut(0, d).copy_from(&w);
    weights.row_mut(d).copy_from(&bias);
    Ok(ProbeWeights { weights })
}

fn centred(m: &DMatrix<f64>, mean: &nalgebra::RowDVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean;
    }
    out
}

/// Per-target RMSE and coefficient of determination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub rmse: Vec<f64>,
    /// `None` where the target column is constant.
    pub r2: Vec<Option<f64>>,
}

impl ProbeScore {
    /// r² of target `k`, or `DegenerateTarget` when it is undefined.
    pub fn r2_of(&self, k: usize) -> Result<f64, ProbeError> {
        self.r2[k].ok_or(ProbeError::DegenerateTarget(k))
    }
}

/// `r² = 1 − SS_res / SS_tot` with `SS_tot` about the mean of `truth`.
pub fn score_predictions(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<ProbeScore, ProbeError> {
    if pred.shape() != truth.shape() {
        return Err(ProbeError::DimensionMismatch {
            what: "prediction rows",
            expected: truth.nrows(),
            got: pred.nrows(),
        });
    }
    let m = truth.nrows();
    if m == 0 {
        return Err(ProbeError::InvalidInput("no samples".into()));
    }
    let mut rmse = Vec::with_capacity(truth.ncols());
    let mut r2 = Vec::with_capacity(truth.ncols());
    for k in 0..truth.ncols() {
        let t = truth.column(k);
        let mean = t.mean();
        let ss_res: f64 = pred.column(k).iter().zip(t.iter()).map(|(p, y)| (p - y).powi(2)).sum();
        let ss_tot: f64 = t.iter().map(|y| (y - mean).powi(2)).sum();
        rmse.push((ss_res / m as f64).sqrt());
        r2.push(if ss_tot > 0.0 { Some(1.0 - ss_res / ss_tot) } else { None });
    }
    Ok(ProbeScore { rmse, r2 })
}

pub fn probe_score(weights: &ProbeWeights, test: &LatentTrajectorySet) -> Result<ProbeScore, ProbeError> {
    let (x, y) = test.stacked();
    if weights.weights.ncols() != y.ncols() {
        return Err(ProbeError::DimensionMismatch {
            what: "target dimension",
            expected: weights.weights.ncols(),
            got: y.ncols(),
        });
    }
    score_predictions(&weights.predict(&x)?, &y)
}

/// Which eigenproblem the PCA solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcaRoute {
    /// Covariance when there are more samples than dimensions, Gram otherwise.
    #[default]
    Auto,
    /// Eigen-decomposition of the `D × D` covariance.
    Covariance,
    /// Eigen-decomposition of the `M × M` Gram matrix of centred samples.
    Gram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `D × k`, orthonormal columns, largest-magnitude loading positive.
    pub components: DMatrix<f64>,
    /// `M × k`
    pub scores: DMatrix<f64>,
    /// Variance along each component (sample variance, `M − 1` denominator).
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
}

pub fn pca_project(latents: &DMatrix<f64>, k: usize) -> Result<Pca, ProbeError> {
    pca_project_with(latents, k, PcaRoute::Auto)
}

pub fn pca_project_with(latents: &DMatrix<f64>, k: usize, route: PcaRoute) -> Result<Pca, ProbeError> {
    let (m, d) = latents.shape();
    if k == 0 || k > m || k > d {
        return Err(ProbeError::InvalidInput(format!(
            "need 1 <= k <= min(M, D); got k = {k} for {m} x {d}"
        )));
    }
    let mean = latents.row_mean();
    let xc = centred(latents, &mean);
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let route = match route {
        PcaRoute::Auto if m > d => PcaRoute::Covariance,
        PcaRoute::Auto => PcaRoute::Gram,
        r => r,
    };
    let (values, mut vectors) = match route {
        PcaRoute::Covariance => {
            let cov = xc.transpose() * &xc / denom;
            top_eigen(cov, k)
        }
        _ => {
            let gram = &xc * xc.transpose() / denom;
            let (values, u) = top_eigen(gram, k);
            // v = X̃ᵀu / √((M − 1)λ)
            let mut v = DMatrix::zeros(d, k);
            for j in 0..k {
                if values[j] > 0.0 {
                    let col = xc.transpose() * u.column(j) / (denom * values[j]).sqrt();
                    v.set_column(j, &col);
                }
            }
            (values, v)
        }
    };
    complete_orthonormal(&mut vectors);
    for j in 0..k {
        let mut col = vectors.column_mut(j);
        let lead = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    let total: f64 = xc.iter().map(|v| v * v).sum::<f64>() / denom;
    let explained_variance: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let scores = &xc * &vectors;
    Ok(Pca {
        mean: mean.transpose(),
        components: vectors,
        scores,
        explained_variance,
        explained_variance_ratio,
        total_variance: total,
    })
}

/// Largest `k` eigenpairs of a symmetric matrix, in decreasing order.
fn top_eigen(a: DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let n = eig.eigenvectors.nrows();
    let mut vectors = DMatrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for (j, &i) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[i]);
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Replaces zero or dependent columns so the columns form an orthonormal set
/// (rank-deficient data leaves some directions undetermined).
fn complete_orthonormal(v: &mut DMatrix<f64>) {
    let (d, k) = v.shape();
    let mut basis = 0;
    for j in 0..k {
        loop {
            let mut col = v.column(j).into_owned();
            for i in 0..j {
                let prev = v.column(i).into_owned();
                col -= &prev * prev.dot(&col);
            }
            let n = col.norm();
            if n > 1e-8 {
                v.set_column(j, &(col / n));
                break;
            }
            let mut e = DVector::zeros(d);
            e[basis % d] = 1.0;
            basis += 1;
            v.set_column(j, &e);
        }
    }
}

/// Mean silhouette `(b − a) / max(a, b)` over all points, Euclidean metric.
/// Members of singleton clusters score 0.
pub fn silhouette_coefficient(points: &DMatrix<f64>, labels: &[usize]) -> Result<f64, ProbeError> {
    let m = points.nrows();
    if labels.len() != m {
        return Err(ProbeError::DimensionMismatch {
            what: "labels",
            expected: m,
            got: labels.len(),
        });
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(ProbeError::SingleCluster);
    }
    let index = |l: usize| clusters.binary_search(&l).unwrap();
    let counts = labels.iter().fold(vec![0usize; clusters.len()], |mut c, &l| {
        c[index(l)] += 1;
        c
    });
    let rows: Vec<DVector<f64>> = (0..m).map(|i| points.row(i).transpose()).collect();
    let per_point: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let own = index(labels[i]);
            if counts[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; clusters.len()];
            for j in 0..m {
                if j != i {
                    sums[index(labels[j])] += (&rows[i] - &rows[j]).norm();
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..clusters.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let scale = a.max(b);
            if scale > 0.0 {
                (b - a) / scale
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / m as f64)
}

/// Silhouette of the trajectory labels at one time index, measured on the
/// PCA scores and on the full latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSilhouette {
    pub time: usize,
    pub sc_pca: f64,
    pub sc_full: f64,
}

pub fn temporal_cluster_report(
    set: &LatentTrajectorySet,
    times: &[usize],
    k: usize,
) -> Result<Vec<TimeSilhouette>, ProbeError> {
    let labels = set.labels();
    times
        .par_iter()
        .map(|&t| {
            let x = set.at_time(t)?;
            let pca = pca_project(&x, k)?;
            Ok(TimeSilhouette {
                time: t,
                sc_pca: silhouette_coefficient(&pca.scores, &labels)?,
                sc_full: silhouette_coefficient(&x, &labels)?,
            })
        })
        .collect()
}

/// Spearman rank correlation, ties sharing their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Shape of a synthetic latent set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentSpec {
    pub trajectories: usize,
    pub steps: usize,
    pub latent_dim: usize,
    pub target_dim: usize,
    pub clusters: usize,
    /// Gaussian noise on the latents (linear sets) or around cluster centres.
    pub noise: f64,
    /// Distance of the cluster centres from the origin at the final step.
    pub separation: f64,
    pub seed: u64,
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec {
            trajectories: 60,
            steps: 100,
            latent_dim: 256,
            target_dim: 4,
            clusters: 3,
            noise: 1.0,
            separation: 120.0,
            seed: 0,
        }
    }
}

/// Latents with Gaussian entries and targets exactly linear in them, plus
/// `target_noise` Gaussian noise. Returns the set and the generating weights.
pub fn linear_latent_set(spec: &LatentSpec, target_noise: f64) -> (LatentTrajectorySet, ProbeWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let (d, k) = (spec.latent_dim, spec.target_dim);
    let weights = DMatrix::from_fn(d + 1, k, |_, _| gauss.sample(&mut rng));
    let probe = ProbeWeights { weights };
    let trajectories = (0..spec.trajectories)
        .map(|i| {
            let latents = DMatrix::from_fn(spec.steps, d, |_, _| gauss.sample(&mut rng));
            let mut targets = probe.predict(&latents).expect("dimensions agree");
            if target_noise > 0.0 {
                targets.iter_mut().for_each(|v| *v += target_noise * gauss.sample(&mut rng));
            }
            LatentTrajectory {
                latents,
                targets,
                label: i % spec.clusters.max(1),
            }
        })
        .collect();
    (LatentTrajectorySet::new(trajectories).expect("consistent dimensions"), probe)
}

/// Trajectories labelled round-robin into `clusters` groups whose latents sit
/// at `(t / (T − 1)) · separation · cᵢ` plus isotropic noise, with `cᵢ`
/// random unit centres: the clusters emerge as time advances. The targets
/// are the cluster offset along the first centre.
pub fn ramped_cluster_set(spec: &LatentSpec) -> LatentTrajectorySet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let d = spec.latent_dim;
    let clusters = spec.clusters.max(1);
    let centres: Vec<DVector<f64>> = (0..clusters)
        .map(|_| DVector::from_fn(d, |_, _| gauss.sample(&mut rng)).normalize())
        .collect();
    let last = (spec.steps.max(2) - 1) as f64;
    let trajectories = (0..spec.trajectories)
        .map(|i| {
            let label = i % clusters;
            let phase: f64 = rng.random_range(0.9..1.1);
            let mut latents = DMatrix::zeros(spec.steps, d);
            let mut targets = DMatrix::zeros(spec.steps, spec.target_dim);
            for t in 0..spec.steps {
                let s = (t as f64 / last * phase).min(1.0) * spec.separation;
                for j in 0..d {
                    latents[(t, j)] = s * centres[label][j] + spec.noise * gauss.sample(&mut rng);
                }
                for c in 0..spec.target_dim {
                    targets[(t, c)] = s * centres[label][c % d];
                }
            }
            LatentTrajectory {
                latents,
                targets,
                label,
            }
        })
        .collect();
    LatentTrajectorySet::new(trajectories).expect("consistent dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spec_seed: u64) -> LatentSpec {
        LatentSpec {
            trajectories: 8,
            steps: 20,
            latent_dim: 6,
            target_dim: 2,
            seed: spec_seed,
            ..LatentSpec::default()
        }
    }

    #[test]
    fn exact_linear_targets_are_recovered() {
        let (set, truth) = linear_latent_set(&small(1), 0.0);
        let w = linear_probe_fit(&set, 0.0).unwrap();
        assert!((w.weights.clone() - truth.weights).abs().max() < 1e-9);
        let s = probe_score(&w, &set).unwrap();
        assert!(s.rmse.iter().all(|&r| r < 1e-9));
        assert!(s.r2.iter().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let (set, _) = linear_latent_set(&small(2), 0.0);
        let zeroed: Vec<LatentTrajectory> = set
            .trajectories()
            .iter()
            .map(|t| LatentTrajectory {
                targets: DMatrix::zeros(t.targets.nrows(), t.targets.ncols()),
                ..t.clone()
            })
            .collect();
        let set = LatentTrajectorySet::new(zeroed).unwrap();
        let w = linear_probe_fit(&set, 1e-3).unwrap();
        assert!(w.weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_matches_augmented_normal_equations() {
        let (set, _) = linear_latent_set(&small(3), 0.5);
        let ridge = 0.7;
        let w = linear_probe_fit(&set, ridge).unwrap();
        // Independent route: uncentred design with a ones column, ridge on
        // every row except the bias.
        let (x, y) = set.stacked();
        let (m, d) = x.shape();
        let mut a = DMatrix::from_element(m, d + 1, 1.0);
        a.columns_mut(0, d).copy_from(&x);
        let mut lhs = a.transpose() * &a;
        for i in 0..d {
            lhs[(i, i)] += ridge;
        }
        let expected = lhs.lu().solve(&(a.transpose() * y)).unwrap();
        assert!((w.weights - expected).abs().max() < 1e-9);
    }

    #[test]
    fn singular_designs() {
        let spec = LatentSpec {
            trajectories: 1,
            steps: 5,
            latent_dim: 6,
            ..small(4)
        };
        let (set, _) = linear_latent_set(&spec, 0.0);
        assert_eq!(linear_probe_fit(&set, 0.0), Err(ProbeError::SingularDesign));
        assert!(linear_probe_fit(&set, 1e-3).is_ok());

        // Duplicated latent column.
        let (set, _) = linear_latent_set(&small(5), 0.0);
        let dup: Vec<LatentTrajectory> = set
            .trajectories()
            .iter()
            .map(|t| {
                let mut l = t.latents.clone();
                let c = l.column(0).into_owned();
                l.set_column(1, &c);
                LatentTrajectory { latents: l, ..t.clone() }
            })
            .collect();
        let set = LatentTrajectorySet::new(dup).unwrap();
        assert_eq!(linear_probe_fit(&set, 0.0), Err(ProbeError::SingularDesign));
    }

    #[test]
    fn score_definitions() {
        let truth = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]);
        let s = score_predictions(&truth, &truth).unwrap();
        assert_eq!(s.rmse, vec![0.0, 0.0]);
        assert_eq!(s.r2[0], Some(1.0));
        assert_eq!(s.r2_of(1), Err(ProbeError::DegenerateTarget(1)));

        let mean = DMatrix::from_row_slice(4, 1, &[3.0; 4]);
        let t = truth.columns(0, 1).into_owned();
        let s = score_predictions(&mean, &t).unwrap();
        assert_eq!(s.r2[0], Some(0.0));
        assert!((s.rmse[0] - (14.0f64 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pca_line_and_identity() {
        let m = 50;
        let x = DMatrix::from_fn(m, 3, |i, j| (i as f64 * 0.1 - 2.0) * [1.0, -2.0, 0.5][j] + [3.0, 1.0, 0.0][j]);
        let p = pca_project(&x, 2).unwrap();
        assert!(p.explained_variance_ratio[1] < 1e-9);
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        let dir = DVector::from_vec(vec![1.0, -2.0, 0.5]).normalize();
        assert!((p.components.column(0).dot(&dir).abs() - 1.0).abs() < 1e-12);
        let first = p.components.column(0);
        let lead = first.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        assert!(lead > 0.0);
    }

    #[test]
    fn pca_routes_agree_and_satisfy_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gauss = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(30, 8, |_, j| gauss.sample(&mut rng) * (1.0 + j as f64));
        let a = pca_project_with(&x, 4, PcaRoute::Covariance).unwrap();
        let b = pca_project_with(&x, 4, PcaRoute::Gram).unwrap();
        assert!((a.components.clone() - b.components).abs().max() < 1e-9);
        assert!((a.scores.clone() - b.scores).abs().max() < 1e-9);

        let gram = a.components.transpose() * &a.components;
        assert!((gram - DMatrix::identity(4, 4)).abs().max() < 1e-12);
        for j in 0..4 {
            assert!(a.scores.column(j).mean().abs() < 1e-9);
        }
        assert!(a.explained_variance_ratio.windows(2).all(|w| w[1] <= w[0]));

        // Reconstruction error = total variance − retained variance.
        let xc = centred(&x, &x.row_mean());
        let recon = &a.scores * a.components.transpose();
        let err: f64 = (xc - recon).iter().map(|v| v * v).sum::<f64>() / 29.0;
        let retained: f64 = a.explained_variance.iter().sum();
        assert!((err - (a.total_variance - retained)).abs() < 1e-9);
    }

    #[test]
    fn pca_on_wide_rank_deficient_data_is_orthonormal() {
        let x = DMatrix::from_fn(3, 10, |i, j| (i * j) as f64);
        let p = pca_project(&x, 3).unwrap();
        let gram = p.components.transpose() * &p.components;
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-9);
        assert!(pca_project(&x, 4).is_err());
        assert!(pca_project(&x, 0).is_err());
    }

    #[test]
    fn silhouette_cases() {
        let pts = DMatrix::from_row_slice(6, 2, &[0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 100.0, 0.0, 100.1, 0.0, 100.0, 0.1]);
        let labels = [0, 0, 0, 1, 1, 1];
        assert!(silhouette_coefficient(&pts, &labels).unwrap() > 0.95);
        assert_eq!(silhouette_coefficient(&pts, &[2; 6]), Err(ProbeError::SingleCluster));

        // Hand-computed: points 0, 1 in cluster A; 4 in cluster B (singleton).
        let line = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 4.0]);
        // s₀ = (4 − 1)/4, s₁ = (3 − 1)/3, s₂ = 0
        let expected = (0.75 + 2.0 / 3.0) / 3.0;
        assert!((silhouette_coefficient(&line, &[0, 0, 1]).unwrap() - expected).abs() < 1e-15);

        // Each point is nearer the other cluster on average: a = 1, b = 0.5.
        let crossed = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(silhouette_coefficient(&crossed, &[0, 0, 1, 1]).unwrap(), -0.5);
    }

    #[test]
    fn constant_latents_have_no_structure() {
        let spec = LatentSpec {
            separation: 0.0,
            noise: 0.0,
            ..small(6)
        };
        let set = ramped_cluster_set(&spec);
        let r = temporal_cluster_report(&set, &[0, 10, 19], 2).unwrap();
        assert!(r.iter().all(|s| s.sc_pca == 0.0 && s.sc_full == 0.0));
    }

    #[test]
    fn identical_labels_are_one_cluster() {
        let spec = LatentSpec {
            clusters: 1,
            ..small(7)
        };
        let set = ramped_cluster_set(&spec);
        assert_eq!(temporal_cluster_report(&set, &[3], 2), Err(ProbeError::SingleCluster));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn set_validation() {
        let a = LatentTrajectory {
            latents: DMatrix::zeros(3, 4),
            targets: DMatrix::zeros(3, 1),
            label: 0,
        };
        let b = LatentTrajectory {
            latents: DMatrix::zeros(3, 5),
            ..a.clone()
        };
        assert!(matches!(
            LatentTrajectorySet::new(vec![a, b]),
            Err(ProbeError::DimensionMismatch { .. })
        ));
    }
}
