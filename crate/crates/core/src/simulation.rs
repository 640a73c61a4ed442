//! Virtual cohort simulation.
//!
//! New individuals are drawn in two stages: the temporal effects `(ξ, τ)` come
//! from a Gaussian KDE over the fitted temporal effects, and the space shifts
//! are then drawn from the Gaussian fitted to all random effects, conditioned
//! on the sampled `(ξ, τ)`.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    eval_trajectory, Dataset, FeatureSpec, FixedEffects, PatientSeries, RandomEffects, Visit,
};
use crate::rng;

pub const SIM_ID_PREFIX: &str = "sim-";

const BANDWIDTH_FLOOR: f64 = 1e-6;
const CONDITIONING_RIDGE: f64 = 1e-9;

/// Two-dimensional Gaussian kernel density estimate over `(ξ, τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    support: Vec<Vector2<f64>>,
    bandwidth: Matrix2<f64>,
    chol: Matrix2<f64>,
    precision: Matrix2<f64>,
    log_norm: f64,
    /// Set when the bandwidth had to be floored.
    pub warning: Option<String>,
}

impl KdeModel {
    /// Builds a KDE with an explicit bandwidth matrix.
    pub fn with_bandwidth(points: &[(f64, f64)], bandwidth: [[f64; 2]; 2]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("KDE needs at least one support point"));
        }
        let h = Matrix2::new(bandwidth[0][0], bandwidth[0][1], bandwidth[1][0], bandwidth[1][1]);
        if (h[(0, 1)] - h[(1, 0)]).abs() > 1e-12 * h.abs().max() {
            return Err(Error::contract("bandwidth matrix is not symmetric"));
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::contract("bandwidth matrix is not positive definite"))?;
        let l = chol.l();
        let precision = chol.inverse();
        let det = l[(0, 0)] * l[(1, 1)];
        Ok(KdeModel {
            support: points.iter().map(|&(a, b)| Vector2::new(a, b)).collect(),
            bandwidth: h,
            chol: l,
            precision,
            log_norm: -(2.0 * std::f64::consts::PI).ln() - det.ln(),
            warning: None,
        })
    }

    pub fn support_points(&self) -> Vec<(f64, f64)> {
        self.support.iter().map(|p| (p[0], p[1])).collect()
    }

    pub fn bandwidth_matrix(&self) -> [[f64; 2]; 2] {
        let h = &self.bandwidth;
        [[h[(0, 0)], h[(0, 1)]], [h[(1, 0)], h[(1, 1)]]]
    }

    pub fn density(&self, x: (f64, f64)) -> f64 {
        let x = Vector2::new(x.0, x.1);
        let sum: f64 = self
            .support
            .iter()
            .map(|p| {
                let r = x - p;
                (self.log_norm - 0.5 * (r.transpose() * self.precision * r)[(0, 0)]).exp()
            })
            .sum();
        sum / self.support.len() as f64
    }

    /// Mean of the KDE: the support-point average.
    pub fn mean(&self) -> (f64, f64) {
        let m = self.support.iter().sum::<Vector2<f64>>() / self.support.len() as f64;
        (m[0], m[1])
    }

    /// Covariance of the KDE: bandwidth plus the (biased) support covariance.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let (mx, my) = self.mean();
        let m = Vector2::new(mx, my);
        let spread = self
            .support
            .iter()
            .map(|p| (p - m) * (p - m).transpose())
            .sum::<Matrix2<f64>>()
            / self.support.len() as f64;
        let c = spread + self.bandwidth;
        [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]]
    }
}

/// Gaussian KDE with Scott's factor `n^(−1/6)` applied to the sample covariance.
pub fn fit_kde(temporal_params: &[(f64, f64)]) -> Result<KdeModel> {
    let n = temporal_params.len();
    if n < 2 {
        return Err(Error::contract(format!("KDE needs at least 2 points, got {n}")));
    }
    let pts: Vec<Vector2<f64>> = temporal_params
        .iter()
        .map(|&(a, b)| Vector2::new(a, b))
        .collect();
    let mean = pts.iter().sum::<Vector2<f64>>() / n as f64;
    let cov = pts
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix2<f64>>()
        / (n - 1) as f64;
    let factor = (n as f64).powf(-1.0 / 6.0);
    let mut h = cov * (factor * factor);
    let mut warning = None;
    let eig = SymmetricEigen::new(h);
    if eig.eigenvalues.min() < BANDWIDTH_FLOOR * BANDWIDTH_FLOOR {
        h += Matrix2::identity() * (BANDWIDTH_FLOOR * BANDWIDTH_FLOOR);
        let msg = "degenerate temporal effects: KDE bandwidth floored".to_string();
        log::warn!("{msg}");
        warning = Some(msg);
    }
    let mut kde = KdeModel::with_bandwidth(
        temporal_params,
        [[h[(0, 0)], h[(0, 1)]], [h[(1, 0)], h[(1, 1)]]],
    )?;
    kde.warning = warning;
    Ok(kde)
}

/// Uniform support point plus kernel noise.
pub fn sample_kde<R: Rng + ?Sized>(kde: &KdeModel, rng: &mut R) -> (f64, f64) {
    let i = rng.random_range(0..kde.support.len());
    let e = Vector2::new(
        rng.sample::<f64, _>(rand_distr::StandardNormal),
        rng.sample::<f64, _>(rand_distr::StandardNormal),
    );
    let x = kde.support[i] + kde.chol * e;
    (x[0], x[1])
}

/// Joint Gaussian over the packed random effects `[ξ, τ, s…]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = mu.len();
        if n < 2 || sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::contract("joint Gaussian needs matching mean/covariance of size ≥ 2"));
        }
        let scale = sigma.abs().max().max(1.0);
        if (&sigma - sigma.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::contract("joint covariance is not symmetric"));
        }
        let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if min_eig < -1e-10 * scale {
            return Err(Error::contract(format!(
                "joint covariance is not PSD (min eigenvalue {min_eig})"
            )));
        }
        Ok(JointGaussian { mu, sigma })
    }

    /// Mean and unbiased covariance of fitted random effects (zero covariance for one sample).
    pub fn fit(effects: &[RandomEffects]) -> Result<Self> {
        if effects.is_empty() {
            return Err(Error::contract("cannot fit a Gaussian to no random effects"));
        }
        let rows: Vec<DVector<f64>> = effects
            .iter()
            .map(|z| DVector::from_vec(z.to_vec()))
            .collect();
        let n = rows.len();
        let p = rows[0].len();
        let mu = rows.iter().fold(DVector::zeros(p), |acc, r| acc + r) / n as f64;
        let mut sigma = DMatrix::zeros(p, p);
        if n > 1 {
            for r in &rows {
                let c = r - &mu;
                sigma += &c * c.transpose();
            }
            sigma /= (n - 1) as f64;
        }
        let sym = (&sigma + sigma.transpose()) * 0.5;
        JointGaussian::new(mu, sym)
    }

    pub fn n_sources(&self) -> usize {
        self.mu.len() - 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Distribution of the space shifts given the temporal effects (Schur complement).
pub fn conditional_gaussian(
    joint: &JointGaussian,
    observed: (f64, f64),
) -> Result<ConditionalGaussian> {
    let ns = joint.n_sources();
    let mu_t = joint.mu.rows(0, 2);
    let mu_s = joint.mu.rows(2, ns);
    let mut s_tt = joint.sigma.view((0, 0), (2, 2)).into_owned();
    for i in 0..2 {
        s_tt[(i, i)] += CONDITIONING_RIDGE;
    }
    let s_st = joint.sigma.view((2, 0), (ns, 2));
    let s_ss = joint.sigma.view((2, 2), (ns, ns));
    let chol = s_tt.cholesky().ok_or_else(|| Error::SingularBlock {
        block: "Sigma_tt (xi, tau)".into(),
    })?;
    let diff = DVector::from_vec(vec![observed.0 - mu_t[0], observed.1 - mu_t[1]]);
    let gain = s_st * chol.inverse();
    let mean = mu_s + &gain * diff;
    let cov = s_ss - &gain * s_st.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(ConditionalGaussian { mean, cov })
}

/// Draws from `N(mean, cov)` for PSD `cov`, clipping tiny negative eigenvalues.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let eig = SymmetricEigen::new(cov.clone());
    let eps = DVector::from_iterator(
        n,
        (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
    );
    let scaled = DVector::from_iterator(
        n,
        eig.eigenvalues
            .iter()
            .zip(eps.iter())
            .map(|(l, e)| l.max(0.0).sqrt() * e),
    );
    mean + eig.eigenvectors * scaled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitCount {
    Fixed(usize),
    /// Uniform over `min..=max`.
    Range { min: usize, max: usize },
    /// `(count, weight)` pairs; weights need not sum to one.
    Weighted(Vec<(usize, f64)>),
}

impl VisitCount {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            VisitCount::Fixed(n) => *n >= 1,
            VisitCount::Range { min, max } => *min >= 1 && min <= max,
            VisitCount::Weighted(w) => {
                !w.is_empty()
                    && w.iter().all(|&(n, p)| n >= 1 && p >= 0.0)
                    && w.iter().map(|p| p.1).sum::<f64>() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid visit count {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            VisitCount::Fixed(n) => *n,
            VisitCount::Range { min, max } => rng.random_range(*min..=*max),
            VisitCount::Weighted(w) => {
                let total: f64 = w.iter().map(|p| p.1).sum();
                let mut u = rng.random::<f64>() * total;
                for &(n, p) in w {
                    if u < p {
                        return n;
                    }
                    u -= p;
                }
                w[w.len() - 1].0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstVisitAge {
    Fixed(f64),
    /// Resampled uniformly from these baseline ages.
    Empirical(Vec<f64>),
}

impl FirstVisitAge {
    pub fn from_dataset(ds: &Dataset) -> Self {
        FirstVisitAge::Empirical(ds.patients.iter().map(PatientSeries::baseline_age).collect())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            FirstVisitAge::Fixed(a) => *a,
            FirstVisitAge::Empirical(ages) => ages[rng.random_range(0..ages.len())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_patients: usize,
    pub visits_per_patient: VisitCount,
    pub visit_spacing: f64,
    pub first_visit_age: FirstVisitAge,
    pub add_noise: bool,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("n_patients must be at least 1"));
        }
        if !(self.visit_spacing > 0.0 && self.visit_spacing.is_finite()) {
            return Err(Error::config("visit_spacing must be > 0"));
        }
        if let FirstVisitAge::Empirical(a) = &self.first_visit_age {
            if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("empirical first-visit ages must be non-empty and finite"));
            }
        }
        self.visits_per_patient.validate()
    }
}

/// Sampler of new individuals from fitted random effects.
#[derive(Debug, Clone)]
pub struct EffectsSampler {
    pub kde: KdeModel,
    pub joint: JointGaussian,
}

impl EffectsSampler {
    pub fn fit(fitted: &[RandomEffects]) -> Result<Self> {
        if fitted.is_empty() {
            return Err(Error::contract("no fitted random effects to sample from"));
        }
        let mut temporal: Vec<(f64, f64)> = fitted.iter().map(|z| (z.xi, z.tau)).collect();
        if temporal.len() == 1 {
            temporal.push(temporal[0]);
        }
        Ok(EffectsSampler {
            kde: fit_kde(&temporal)?,
            joint: JointGaussian::fit(fitted)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RandomEffects> {
        let (xi, tau) = sample_kde(&self.kde, rng);
        let cond = conditional_gaussian(&self.joint, (xi, tau))?;
        let s = sample_gaussian(&cond.mean, &cond.cov, rng);
        Ok(RandomEffects {
            xi,
            tau,
            s: s.iter().copied().collect(),
        })
    }
}

/// Synthesizes `cfg.n_patients` virtual patients with ids `sim-00000…`.
pub fn simulate_cohort(
    theta: &FixedEffects,
    fitted_z: &[RandomEffects],
    features: &[FeatureSpec],
    cfg: &SimulationConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    theta.validate()?;
    if features.len() != theta.dim() {
        return Err(Error::contract(format!(
            "{} feature specs for a {}-dimensional model",
            features.len(),
            theta.dim()
        )));
    }
    let sampler = EffectsSampler::fit(fitted_z)?;
    let noise = theta.noise();
    let patients = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, &[i as u64]);
            let z = sampler.sample(&mut rng)?;
            let start = cfg.first_visit_age.sample(&mut rng);
            let n_visits = cfg.visits_per_patient.sample(&mut rng);
            let visits = (0..n_visits)
                .map(|j| {
                    let age = start + j as f64 * cfg.visit_spacing;
                    let mut values = eval_trajectory(theta, &z, age)?;
                    if cfg.add_noise {
                        values
                            .iter_mut()
                            .for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                    }
                    Visit::observed(age, values)
                })
                .collect::<Result<Vec<_>>>()?;
            PatientSeries::new(format!("{SIM_ID_PREFIX}{i:05}"), visits)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(patients, features.to_vec())
}
