//! Generative spatiotemporal mixed-effects model.
//!
//! Each feature follows a logistic curve in a per-patient latent time
//!
//! ```text
//! ψ_i(t)  = exp(ξ_i) · (t − t0 − τ_i) + t0
//! f_k(t)  = logistic(ρ_k · (ψ_i(t) − δ_k) + w_ik),   w_i = A · s_i
//! y_ijk   = f_k(t_ij) + ε,                           ε ~ N(0, σ²)
//! ```
//!
//! so `ξ` sets the pace, `τ` the delay, and the space shifts `s` reorder the
//! features relative to each other.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A single timestamped observation of `d` normalized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub age: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Visit {
    pub fn new(age: f64, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let visit = Visit { age, values, mask };
        visit.validate()?;
        Ok(visit)
    }

    /// A visit with every feature observed.
    pub fn observed(age: f64, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(age, values, mask)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.age.is_finite() {
            return Err(Error::contract(format!("visit age {} is not finite", self.age)));
        }
        if self.values.len() != self.mask.len() {
            return Err(Error::contract(format!(
                "visit at age {} has {} values but {} mask entries",
                self.age,
                self.values.len(),
                self.mask.len()
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::contract(format!(
                "visit at age {} has no observed feature",
                self.age
            )));
        }
        for (k, (&v, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if m && !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!(
                    "visit at age {}: feature {k} value {v} outside [0, 1]",
                    self.age
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.n_observed() as f64 / self.dim() as f64
    }

    pub fn value(&self, k: usize) -> Option<f64> {
        self.mask[k].then(|| self.values[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSeries {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl PatientSeries {
    pub fn new(id: impl Into<String>, visits: Vec<Visit>) -> Result<Self> {
        let series = PatientSeries {
            id: id.into(),
            visits,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visits.is_empty() {
            return Err(Error::contract(format!("patient {} has no visits", self.id)));
        }
        let d = self.visits[0].dim();
        for v in &self.visits {
            v.validate()?;
            if v.dim() != d {
                return Err(Error::contract(format!(
                    "patient {} mixes feature dimensions {d} and {}",
                    self.id,
                    v.dim()
                )));
            }
        }
        if let Some(w) = self.visits.windows(2).find(|w| w[1].age <= w[0].age) {
            return Err(Error::contract(format!(
                "patient {}: visit ages not strictly increasing ({} then {})",
                self.id, w[0].age, w[1].age
            )));
        }
        Ok(())
    }

    pub fn baseline_age(&self) -> f64 {
        self.visits[0].age
    }

    pub fn span(&self) -> f64 {
        self.visits[self.visits.len() - 1].age - self.visits[0].age
    }

    pub fn n_observed(&self) -> usize {
        self.visits.iter().map(Visit::n_observed).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Raw score grows with disease severity (e.g. ADAS-Cog).
    Increasing,
    /// Raw score shrinks with disease severity (e.g. MMSE).
    Decreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub raw_max: f64,
    pub direction: Direction,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, raw_max: f64, direction: Direction) -> Result<Self> {
        if !(raw_max > 0.0 && raw_max.is_finite()) {
            return Err(Error::contract(format!("raw_max must be > 0, got {raw_max}")));
        }
        Ok(FeatureSpec {
            name: name.into(),
            raw_max,
            direction,
        })
    }

    /// Maps a raw score onto `[0, 1]`, oriented so that larger means more severe.
    pub fn normalize(&self, raw: f64) -> f64 {
        let v = raw / self.raw_max;
        match self.direction {
            Direction::Increasing => v,
            Direction::Decreasing => 1.0 - v,
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let v = match self.direction {
            Direction::Increasing => v,
            Direction::Decreasing => 1.0 - v,
        };
        v * self.raw_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub patients: Vec<PatientSeries>,
    pub features: Vec<FeatureSpec>,
}

impl Dataset {
    pub fn new(patients: Vec<PatientSeries>, features: Vec<FeatureSpec>) -> Result<Self> {
        let ds = Dataset { patients, features };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let mut seen = HashSet::new();
        for p in &self.patients {
            p.validate()?;
            if p.visits[0].dim() != d {
                return Err(Error::contract(format!(
                    "patient {} has dimension {} but dataset declares {d}",
                    p.id,
                    p.visits[0].dim()
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::contract(format!("duplicate patient id {}", p.id)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    /// Sub-cohort with the given patients, in the given order.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let mut by_id: Vec<&PatientSeries> = self
            .patients
            .iter()
            .filter(|p| wanted.contains(p.id.as_str()))
            .collect();
        let order: std::collections::HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        by_id.sort_by_key(|p| order[p.id.as_str()]);
        Dataset {
            patients: by_id.into_iter().cloned().collect(),
            features: self.features.clone(),
        }
    }

    /// Keeps only the named features; visits left without any observed value are dropped,
    /// then patients left without visits.
    pub fn select_features(&self, names: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_index(n)
                    .ok_or_else(|| Error::config(format!("unknown feature {n:?}")))
            })
            .collect::<Result<_>>()?;
        let features = idx.iter().map(|&k| self.features[k].clone()).collect();
        let patients = self
            .patients
            .iter()
            .filter_map(|p| {
                let visits: Vec<Visit> = p
                    .visits
                    .iter()
                    .map(|v| Visit {
                        age: v.age,
                        values: idx.iter().map(|&k| v.values[k]).collect(),
                        mask: idx.iter().map(|&k| v.mask[k]).collect(),
                    })
                    .filter(|v| v.n_observed() > 0)
                    .collect();
                (!visits.is_empty()).then(|| PatientSeries {
                    id: p.id.clone(),
                    visits,
                })
            })
            .collect();
        Ok(Dataset { patients, features })
    }

    pub fn merge(&self, other: &Dataset) -> Result<Dataset> {
        if self.features != other.features {
            return Err(Error::contract("cannot merge datasets with different features"));
        }
        let mut patients = self.patients.clone();
        patients.extend(other.patients.iter().cloned());
        Dataset::new(patients, self.features.clone())
    }
}

/// Population parameters θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub t0: f64,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    /// `d × N_s` mixing matrix, stored row by row.
    pub mixing: Vec<Vec<f64>>,
    pub sigma: f64,
    pub prior_xi_std: f64,
    pub prior_tau_std: f64,
    pub prior_s_std: f64,
}

impl FixedEffects {
    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    pub fn n_sources(&self) -> usize {
        self.mixing.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::contract("fixed effects have zero features"));
        }
        if self.delta.len() != d || self.mixing.len() != d {
            return Err(Error::contract(format!(
                "fixed effects dimension mismatch: rho {d}, delta {}, mixing rows {}",
                self.delta.len(),
                self.mixing.len()
            )));
        }
        let ns = self.n_sources();
        if self.mixing.iter().any(|r| r.len() != ns) {
            return Err(Error::contract("ragged mixing matrix"));
        }
        if ns > d {
            return Err(Error::contract(format!("N_s = {ns} exceeds feature dimension {d}")));
        }
        if self.rho.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::contract("all rho_k must be finite and > 0"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::contract(format!("sigma must be > 0, got {}", self.sigma)));
        }
        for (name, v) in [
            ("prior_xi_std", self.prior_xi_std),
            ("prior_tau_std", self.prior_tau_std),
            ("prior_s_std", self.prior_s_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be > 0, got {v}")));
            }
        }
        let all_finite = self.t0.is_finite()
            && self.delta.iter().all(|v| v.is_finite())
            && self.mixing.iter().flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::contract("non-finite fixed effect"));
        }
        Ok(())
    }

    /// Space shift `w = A·s` for one individual.
    pub fn space_shift(&self, s: &[f64]) -> Vec<f64> {
        self.mixing
            .iter()
            .map(|row| row.iter().zip(s).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel { sigma: self.sigma }
    }
}

/// Per-patient random effects `z_i = (ξ, τ, s)`, with pace `α = exp(ξ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub xi: f64,
    pub tau: f64,
    pub s: Vec<f64>,
}

impl RandomEffects {
    pub fn zeros(n_sources: usize) -> Self {
        RandomEffects {
            xi: 0.0,
            tau: 0.0,
            s: vec![0.0; n_sources],
        }
    }

    pub fn pace(&self) -> f64 {
        self.xi.exp()
    }

    /// Packed layout `[xi, tau, s_1, …, s_Ns]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.s.len());
        v.push(self.xi);
        v.push(self.tau);
        v.extend_from_slice(&self.s);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        RandomEffects {
            xi: v[0],
            tau: v[1],
            s: v[2..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.xi.is_finite() && self.tau.is_finite() && self.s.iter().all(|v| v.is_finite())
    }
}

/// I.i.d. Gaussian observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

impl NoiseModel {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        self.sigma * z
    }

    pub fn log_density(&self, residual: f64) -> f64 {
        let r = residual / self.sigma;
        -0.5 * r * r - self.sigma.ln() - LN_SQRT_2PI
    }
}

pub fn reparametrize_time(z: &RandomEffects, t: f64, t0: f64) -> f64 {
    z.xi.exp() * (t - t0 - z.tau) + t0
}

fn check_dims(theta: &FixedEffects, z: &RandomEffects) -> Result<()> {
    if z.s.len() != theta.n_sources() {
        return Err(Error::contract(format!(
            "space shift has {} sources but mixing matrix has {} columns",
            z.s.len(),
            theta.n_sources()
        )));
    }
    Ok(())
}

/// Group trajectory deformed by `z`, evaluated at age `t`.
pub fn eval_trajectory(theta: &FixedEffects, z: &RandomEffects, t: f64) -> Result<Vec<f64>> {
    check_dims(theta, z)?;
    let w = theta.space_shift(&z.s);
    Ok(trajectory_with_shift(theta, z, &w, t))
}

pub(crate) fn trajectory_with_shift(
    theta: &FixedEffects,
    z: &RandomEffects,
    w: &[f64],
    t: f64,
) -> Vec<f64> {
    let psi = reparametrize_time(z, t, theta.t0);
    theta
        .rho
        .iter()
        .zip(&theta.delta)
        .zip(w)
        .map(|((&rho, &delta), &wk)| logistic(rho * (psi - delta) + wk))
        .collect()
}

/// `log p(z; θ)` under independent zero-mean Gaussian priors.
pub fn prior_log_density(z: &RandomEffects, theta: &FixedEffects) -> f64 {
    let gauss = |x: f64, sd: f64| {
        let r = x / sd;
        -0.5 * r * r - sd.ln() - LN_SQRT_2PI
    };
    gauss(z.xi, theta.prior_xi_std)
        + gauss(z.tau, theta.prior_tau_std)
        + z.s.iter().map(|&s| gauss(s, theta.prior_s_std)).sum::<f64>()
}

/// `log p(y_i | z; θ)` summed over observed coordinates only.
pub fn data_log_likelihood(y: &PatientSeries, z: &RandomEffects, theta: &FixedEffects) -> f64 {
    let noise = theta.noise();
    let w = theta.space_shift(&z.s);
    y.visits
        .iter()
        .map(|v| {
            let f = trajectory_with_shift(theta, z, &w, v.age);
            v.values
                .iter()
                .zip(&v.mask)
                .zip(&f)
                .filter(|((_, &m), _)| m)
                .map(|((&obs, _), &fk)| noise.log_density(obs - fk))
                .sum::<f64>()
        })
        .sum()
}

/// Individual complete log-likelihood `log p(y_i | z; θ) + log p(z; θ)`.
///
/// Dimensions of `z` and `theta` are assumed consistent; see [`eval_trajectory`]
/// for the checked entry point.
pub fn individual_log_likelihood(
    y: &PatientSeries,
    z: &RandomEffects,
    theta: &FixedEffects,
) -> f64 {
    data_log_likelihood(y, z, theta) + prior_log_density(z, theta)
}

/// Gradient of the data term w.r.t. `z`, packed as `[xi, tau, s…]`.
pub fn data_gradient(y: &PatientSeries, z: &RandomEffects, theta: &FixedEffects) -> Vec<f64> {
    let ns = theta.n_sources();
    let w = theta.space_shift(&z.s);
    let pace = z.pace();
    let inv_var = 1.0 / (theta.sigma * theta.sigma);
    let mut grad = vec![0.0; 2 + ns];
    // per-coordinate chain term accumulated over visits, then pushed through Aᵀ
    let mut dw = vec![0.0; theta.dim()];
    for v in &y.visits {
        let psi = reparametrize_time(z, v.age, theta.t0);
        let elapsed = v.age - theta.t0 - z.tau;
        for k in 0..theta.dim() {
            if !v.mask[k] {
                continue;
            }
            let f = logistic(theta.rho[k] * (psi - theta.delta[k]) + w[k]);
            let chain = (v.values[k] - f) * inv_var * f * (1.0 - f);
            grad[0] += chain * theta.rho[k] * pace * elapsed;
            grad[1] -= chain * theta.rho[k] * pace;
            dw[k] += chain;
        }
    }
    for (k, row) in theta.mixing.iter().enumerate() {
        for (l, a) in row.iter().enumerate() {
            grad[2 + l] += a * dw[k];
        }
    }
    grad
}

/// Analytic gradient of [`individual_log_likelihood`] w.r.t. `z`, packed as `[xi, tau, s…]`.
pub fn gradient_log_likelihood(
    y: &PatientSeries,
    z: &RandomEffects,
    theta: &FixedEffects,
) -> Vec<f64> {
    let mut grad = data_gradient(y, z, theta);
    grad[0] -= z.xi / theta.prior_xi_std.powi(2);
    grad[1] -= z.tau / theta.prior_tau_std.powi(2);
    let s_var = theta.prior_s_std.powi(2);
    for (g, s) in grad[2..].iter_mut().zip(&z.s) {
        *g -= s / s_var;
    }
    grad
}

/// `−(m/2)·log(2π)`-style constant for `m` unit-variance observations; handy in tests.
pub fn gaussian_log_normalizer(m: usize, sigma: f64) -> f64 {
    -(m as f64) * (sigma.ln() + 0.5 * (2.0 * PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn theta4() -> FixedEffects {
        FixedEffects {
            t0: 72.0,
            rho: vec![0.5, 0.8, 0.3, 0.6],
            delta: vec![70.0, 72.5, 75.0, 73.0],
            mixing: vec![
                vec![0.4, 0.0],
                vec![-0.3, 0.5],
                vec![0.0, -0.6],
                vec![0.2, 0.2],
            ],
            sigma: 0.05,
            prior_xi_std: 0.5,
            prior_tau_std: 4.0,
            prior_s_std: 1.0,
        }
    }

    fn patient_on(theta: &FixedEffects, z: &RandomEffects, ages: &[f64]) -> PatientSeries {
        let visits = ages
            .iter()
            .map(|&a| Visit::observed(a, eval_trajectory(theta, z, a).unwrap()).unwrap())
            .collect();
        PatientSeries::new("p", visits).unwrap()
    }

    #[test]
    fn reparametrize_time_examples() {
        let z = |xi: f64, tau: f64| RandomEffects { xi, tau, s: vec![] };
        assert_eq!(reparametrize_time(&z(0.0, 0.0), 75.0, 70.0), 75.0);
        assert_abs_diff_eq!(
            reparametrize_time(&z(2f64.ln(), 0.0), 72.0, 70.0),
            74.0,
            epsilon = 1e-12
        );
        assert_eq!(reparametrize_time(&z(0.0, 3.0), 75.0, 70.0), 72.0);
    }

    #[test]
    fn logistic_midpoint_and_saturation() {
        let theta = theta4();
        let z = RandomEffects::zeros(2);
        let f = eval_trajectory(&theta, &z, theta.delta[1]).unwrap();
        assert_abs_diff_eq!(f[1], 0.5, epsilon = 1e-15);

        let mut steep = theta.clone();
        steep.rho = vec![200.0; 4];
        let f = eval_trajectory(&steep, &z, 90.0).unwrap();
        assert!(f.iter().all(|&v| v > 1.0 - 1e-12));
    }

    #[test]
    fn trajectory_matches_scalar_formula() {
        let theta = theta4();
        let z = RandomEffects {
            xi: 0.3,
            tau: -2.0,
            s: vec![0.7, -1.1],
        };
        for &t in &[60.0, 68.5, 72.0, 77.25, 85.0] {
            let f = eval_trajectory(&theta, &z, t).unwrap();
            for k in 0..4 {
                let psi = 0.3f64.exp() * (t - 72.0 + 2.0) + 72.0;
                let w = theta.mixing[k][0] * 0.7 - theta.mixing[k][1] * 1.1;
                let x = theta.rho[k] * (psi - theta.delta[k]) + w;
                let expect = 1.0 / (1.0 + (-x).exp());
                assert_abs_diff_eq!(f[k], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = eval_trajectory(&theta4(), &RandomEffects::zeros(3), 70.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn noiseless_data_term_is_normalizer_only() {
        let mut theta = theta4();
        theta.sigma = 1.0;
        let z = RandomEffects {
            xi: 0.1,
            tau: 1.0,
            s: vec![0.2, 0.3],
        };
        let y = patient_on(&theta, &z, &[70.0, 71.0, 72.0]);
        let m = 12;
        assert_abs_diff_eq!(
            data_log_likelihood(&y, &z, &theta),
            -(m as f64) / 2.0 * (2.0 * PI).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_masked_coordinate_matches_direct_formula() {
        let theta = theta4();
        let z = RandomEffects {
            xi: 0.2,
            tau: -1.0,
            s: vec![0.5, 0.1],
        };
        let v = Visit::new(73.0, vec![0.0, 0.42, 0.0, 0.0], vec![false, true, false, false]).unwrap();
        let y = PatientSeries::new("x", vec![v]).unwrap();
        let f = eval_trajectory(&theta, &z, 73.0).unwrap()[1];
        let r = 0.42 - f;
        let sig = theta.sigma;
        let normal = |x: f64, sd: f64| -0.5 * (x / sd).powi(2) - (sd * (2.0 * PI).sqrt()).ln();
        let expect = -0.5 * (r / sig).powi(2) - (sig * (2.0 * PI).sqrt()).ln()
            + normal(0.2, 0.5)
            + normal(-1.0, 4.0)
            + normal(0.5, 1.0)
            + normal(0.1, 1.0);
        assert_abs_diff_eq!(individual_log_likelihood(&y, &z, &theta), expect, epsilon = 1e-12);
    }

    #[test]
    fn prior_at_zero_with_unit_stds() {
        let mut theta = theta4();
        theta.prior_xi_std = 1.0;
        theta.prior_tau_std = 1.0;
        theta.prior_s_std = 1.0;
        let n01 = -0.5 * (2.0 * PI).ln();
        assert_abs_diff_eq!(
            prior_log_density(&RandomEffects::zeros(2), &theta),
            4.0 * n01,
            epsilon = 1e-14
        );
        let theta1 = FixedEffects {
            mixing: vec![vec![]; 4],
            ..theta
        };
        assert_abs_diff_eq!(
            prior_log_density(&RandomEffects::zeros(0), &theta1),
            2.0 * n01,
            epsilon = 1e-14
        );
    }

    #[test]
    fn data_gradient_vanishes_at_generating_point() {
        let theta = theta4();
        let z = RandomEffects {
            xi: -0.2,
            tau: 2.0,
            s: vec![1.0, -0.4],
        };
        let y = patient_on(&theta, &z, &[70.0, 71.0, 72.0, 74.0]);
        for g in data_gradient(&y, &z, &theta) {
            assert!(g.abs() < 1e-10, "{g}");
        }
    }

    #[test]
    fn s_gradient_matches_entrywise_perturbation() {
        let theta = theta4();
        let z = RandomEffects {
            xi: 0.1,
            tau: 0.5,
            s: vec![0.3, -0.2],
        };
        let y = PatientSeries::new(
            "p",
            vec![
                Visit::observed(71.0, vec![0.3, 0.4, 0.1, 0.5]).unwrap(),
                Visit::new(73.0, vec![0.6, 0.0, 0.2, 0.7], vec![true, false, true, true]).unwrap(),
            ],
        )
        .unwrap();
        let g = data_gradient(&y, &z, &theta);
        for l in 0..2 {
            let h = 1e-6;
            let mut up = z.clone();
            up.s[l] += h;
            let mut dn = z.clone();
            dn.s[l] -= h;
            let fd = (data_log_likelihood(&y, &up, &theta) - data_log_likelihood(&y, &dn, &theta))
                / (2.0 * h);
            assert_abs_diff_eq!(g[2 + l], fd, epsilon = 1e-5 * fd.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(
            xi in -2.0..2.0f64, tau in -10.0..10.0f64,
            s0 in -3.0..3.0f64, s1 in -3.0..3.0f64,
            t in 50.0..95.0f64, dt in 0.01..5.0f64,
        ) {
            let theta = theta4();
            let z = RandomEffects { xi, tau, s: vec![s0, s1] };
            let a = eval_trajectory(&theta, &z, t).unwrap();
            let b = eval_trajectory(&theta, &z, t + dt).unwrap();
            for k in 0..4 {
                prop_assert!(a[k] > 0.0 && a[k] < 1.0 || a[k] == 0.0 || a[k] == 1.0);
                // strict in exact arithmetic; allow for saturation in f64
                prop_assert!(b[k] >= a[k]);
                if a[k] > 1e-9 && a[k] < 1.0 - 1e-9 {
                    prop_assert!(b[k] > a[k]);
                    prop_assert!(a[k] > 0.0 && a[k] < 1.0);
                }
            }
        }

        #[test]
        fn time_shift_equivariance(
            xi in -2.0..2.0f64, tau in -10.0..10.0f64,
            s0 in -3.0..3.0f64, s1 in -3.0..3.0f64, t in 55.0..90.0f64,
        ) {
            let theta = theta4();
            let z = RandomEffects { xi, tau, s: vec![s0, s1] };
            let z0 = RandomEffects { xi: 0.0, tau: 0.0, s: vec![s0, s1] };
            let a = eval_trajectory(&theta, &z, t).unwrap();
            let b = eval_trajectory(&theta, &z0, reparametrize_time(&z, t, theta.t0)).unwrap();
            for k in 0..4 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn masked_values_never_matter(junk in 0.0..1.0f64, xi in -1.0..1.0f64) {
            let theta = theta4();
            let z = RandomEffects { xi, tau: 1.0, s: vec![0.1, 0.2] };
            let mk = |x: f64| PatientSeries::new("p", vec![
                Visit::new(72.0, vec![0.3, x, 0.5, 0.2], vec![true, false, true, true]).unwrap(),
            ]).unwrap();
            let a = individual_log_likelihood(&mk(0.0), &z, &theta);
            let b = individual_log_likelihood(&mk(junk), &z, &theta);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn normalization_round_trip() {
        let mmse = FeatureSpec::new("MMSE", 30.0, Direction::Decreasing).unwrap();
        assert_eq!(mmse.normalize(30.0), 0.0);
        assert_eq!(mmse.normalize(15.0), 0.5);
        for raw in [0.0, 7.0, 13.5, 29.0] {
            assert_abs_diff_eq!(mmse.denormalize(mmse.normalize(raw)), raw, epsilon = 1e-12);
        }
    }

    #[test]
    fn visit_and_series_invariants() {
        assert!(Visit::new(70.0, vec![0.5], vec![false]).is_err());
        assert!(Visit::new(f64::NAN, vec![0.5], vec![true]).is_err());
        assert!(Visit::observed(70.0, vec![1.5]).is_err());
        let v = |a| Visit::observed(a, vec![0.1]).unwrap();
        assert!(PatientSeries::new("p", vec![v(71.0), v(70.0)]).is_err());
        assert!(PatientSeries::new("p", vec![]).is_err());
    }
}
