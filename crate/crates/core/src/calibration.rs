//! MCMC-SAEM estimation of the fixed effects.
//!
//! Each iteration runs Metropolis-within-Gibbs sweeps over every patient's
//! random effects (simulation step), accumulates sufficient statistics at the
//! new samples, blends them into the running statistics with the stochastic
//! approximation step `γ_k`, and moves θ (maximization step).
//!
//! The logistic means have no closed-form M-step. The statistics kept for
//! `(ρ_k, δ_k, A_k·)` are the Gauss–Newton normal equations of feature `k`,
//! `Σ JJᵀ` and `Σ J(r + Jᵀθ_k)`. Both are invariant to the linearization point
//! for a quadratic model, so smoothing them gives the normal equations of the
//! smoothed complete log-likelihood and θ takes one bounded step towards its
//! solution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    data_log_likelihood, individual_log_likelihood, logistic, reparametrize_time, Dataset,
    FixedEffects, PatientSeries, RandomEffects,
};
use crate::rng;

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

const SIGMA_FLOOR: f64 = 1e-6;
const PRIOR_STD_FLOOR: f64 = 1e-3;
const RHO_FLOOR: f64 = 1e-4;
const MAX_DELTA_STEP: f64 = 2.0;
const MAX_MIXING_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalStds {
    pub xi: f64,
    pub tau: f64,
    pub s: f64,
}

impl Default for ProposalStds {
    fn default() -> Self {
        ProposalStds {
            xi: 0.1,
            tau: 1.0,
            s: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaemConfig {
    pub n_iter: usize,
    pub n_burn_in: usize,
    pub step_exponent: f64,
    pub proposal_stds: ProposalStds,
    pub seed: u64,
    /// Number of space-shift sources; `None` picks `min(d − 1, 2)`.
    pub n_sources: Option<usize>,
    /// Gibbs sweeps over the three blocks per patient and iteration.
    pub mh_sweeps: usize,
}

impl Default for SaemConfig {
    fn default() -> Self {
        SaemConfig {
            n_iter: 400,
            n_burn_in: 200,
            step_exponent: 0.65,
            proposal_stds: ProposalStds::default(),
            seed: 0,
            n_sources: None,
            mh_sweeps: 1,
        }
    }
}

impl SaemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::config("n_iter must be positive"));
        }
        if self.n_burn_in >= self.n_iter {
            return Err(Error::config(format!(
                "n_burn_in ({}) must be below n_iter ({})",
                self.n_burn_in, self.n_iter
            )));
        }
        if !(self.step_exponent > 0.5 && self.step_exponent <= 1.0) {
            return Err(Error::config(format!(
                "step_exponent {} outside (0.5, 1]",
                self.step_exponent
            )));
        }
        let p = &self.proposal_stds;
        if !(p.xi > 0.0 && p.tau > 0.0 && p.s > 0.0) {
            return Err(Error::config("proposal stds must be positive"));
        }
        if self.mh_sweeps == 0 {
            return Err(Error::config("mh_sweeps must be positive"));
        }
        Ok(())
    }

    pub fn n_sources_for(&self, d: usize) -> usize {
        self.n_sources.unwrap_or_else(|| d.saturating_sub(1).min(2))
    }
}

/// Stochastic-approximation step: 1 during burn-in, then `(k − burn_in)^(−exponent)`.
pub fn step_size(k: usize, cfg: &SaemConfig) -> f64 {
    debug_assert!(k >= 1);
    if k <= cfg.n_burn_in {
        1.0
    } else {
        ((k - cfg.n_burn_in) as f64).powf(-cfg.step_exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Xi,
    Tau,
    Sources,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Xi, Block::Tau, Block::Sources];
}

fn propose<R: Rng + ?Sized>(
    z: &RandomEffects,
    block: Block,
    proposal_std: f64,
    rng: &mut R,
) -> RandomEffects {
    let mut normal = || -> f64 { rng.sample(rand_distr::StandardNormal) };
    let mut out = z.clone();
    match block {
        Block::Xi => out.xi += proposal_std * normal(),
        Block::Tau => out.tau += proposal_std * normal(),
        Block::Sources => out.s.iter_mut().for_each(|s| *s += proposal_std * normal()),
    }
    out
}

fn mh_step_cached<R: Rng + ?Sized>(
    y: &PatientSeries,
    z: RandomEffects,
    current_ll: f64,
    theta: &FixedEffects,
    block: Block,
    proposal_std: f64,
    rng: &mut R,
) -> (RandomEffects, f64, bool) {
    let candidate = propose(&z, block, proposal_std, rng);
    let candidate_ll = individual_log_likelihood(y, &candidate, theta);
    let delta = candidate_ll - current_ll;
    let u: f64 = rng.random();
    if delta >= 0.0 || u.ln() < delta {
        (candidate, candidate_ll, true)
    } else {
        (z, current_ll, false)
    }
}

/// One symmetric random-walk Metropolis–Hastings move on a single block of `z`.
pub fn mh_block_step<R: Rng + ?Sized>(
    y: &PatientSeries,
    z: &RandomEffects,
    theta: &FixedEffects,
    block: Block,
    proposal_std: f64,
    rng: &mut R,
) -> (RandomEffects, bool) {
    let ll = individual_log_likelihood(y, z, theta);
    let (z, _, accepted) = mh_step_cached(y, z.clone(), ll, theta, block, proposal_std, rng);
    (z, accepted)
}

/// Running statistics of the complete model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub sum_sq_residual: f64,
    pub n_obs: f64,
    pub sum_xi_sq: f64,
    pub sum_tau_sq: f64,
    pub n_patients: f64,
    /// Per feature, row-major `p × p` Gauss–Newton matrix over `(ρ_k, δ_k, A_k·)`, `p = 2 + N_s`.
    pub normal_matrix: Vec<Vec<f64>>,
    /// Per feature, `Σ J (r + Jᵀθ_k)`.
    pub normal_rhs: Vec<Vec<f64>>,
}

impl SufficientStats {
    pub fn zeros(d: usize, n_sources: usize) -> Self {
        let p = 2 + n_sources;
        SufficientStats {
            sum_sq_residual: 0.0,
            n_obs: 0.0,
            sum_xi_sq: 0.0,
            sum_tau_sq: 0.0,
            n_patients: 0.0,
            normal_matrix: vec![vec![0.0; p * p]; d],
            normal_rhs: vec![vec![0.0; p]; d],
        }
    }

    fn for_each_pair(&mut self, other: &SufficientStats, mut op: impl FnMut(&mut f64, f64)) {
        op(&mut self.sum_sq_residual, other.sum_sq_residual);
        op(&mut self.n_obs, other.n_obs);
        op(&mut self.sum_xi_sq, other.sum_xi_sq);
        op(&mut self.sum_tau_sq, other.sum_tau_sq);
        op(&mut self.n_patients, other.n_patients);
        for (a, b) in self.normal_matrix.iter_mut().zip(&other.normal_matrix) {
            a.iter_mut().zip(b).for_each(|(x, &y)| op(x, y));
        }
        for (a, b) in self.normal_rhs.iter_mut().zip(&other.normal_rhs) {
            a.iter_mut().zip(b).for_each(|(x, &y)| op(x, y));
        }
    }

    pub fn add(&mut self, other: &SufficientStats) {
        self.for_each_pair(other, |a, b| *a += b);
    }

    /// `S ← S + step·(S_new − S)`.
    pub fn blend(&mut self, fresh: &SufficientStats, step: f64) {
        if step == 1.0 {
            *self = fresh.clone();
            return;
        }
        self.for_each_pair(fresh, |a, b| *a += step * (b - *a));
    }

    /// Statistics of one patient at its current random effects.
    pub fn of_patient(y: &PatientSeries, z: &RandomEffects, theta: &FixedEffects) -> Self {
        let d = theta.dim();
        let ns = theta.n_sources();
        let p = 2 + ns;
        let mut st = SufficientStats::zeros(d, ns);
        st.sum_xi_sq = z.xi * z.xi;
        st.sum_tau_sq = z.tau * z.tau;
        st.n_patients = 1.0;
        let w = theta.space_shift(&z.s);
        let mut jac = vec![0.0; p];
        for v in &y.visits {
            let psi = reparametrize_time(z, v.age, theta.t0);
            for k in 0..d {
                if !v.mask[k] {
                    continue;
                }
                let f = logistic(theta.rho[k] * (psi - theta.delta[k]) + w[k]);
                let r = v.values[k] - f;
                st.sum_sq_residual += r * r;
                st.n_obs += 1.0;

                let slope = f * (1.0 - f);
                jac[0] = slope * (psi - theta.delta[k]);
                jac[1] = -slope * theta.rho[k];
                for l in 0..ns {
                    jac[2 + l] = slope * z.s[l];
                }
                let jt_theta = jac[0] * theta.rho[k]
                    + jac[1] * theta.delta[k]
                    + (0..ns).map(|l| jac[2 + l] * theta.mixing[k][l]).sum::<f64>();
                let target = r + jt_theta;
                let m = &mut st.normal_matrix[k];
                for a in 0..p {
                    for b in 0..p {
                        m[a * p + b] += jac[a] * jac[b];
                    }
                }
                for (rhs, j) in st.normal_rhs[k].iter_mut().zip(&jac) {
                    *rhs += j * target;
                }
            }
        }
        st
    }

    /// Statistics of a cohort; patient contributions are summed in dataset order.
    pub fn of_cohort(ds: &Dataset, zs: &[RandomEffects], theta: &FixedEffects) -> Self {
        let parts: Vec<SufficientStats> = ds
            .patients
            .par_iter()
            .zip(zs.par_iter())
            .map(|(y, z)| SufficientStats::of_patient(y, z, theta))
            .collect();
        let mut total = SufficientStats::zeros(theta.dim(), theta.n_sources());
        for part in &parts {
            total.add(part);
        }
        total
    }
}

fn feature_params(theta: &FixedEffects, k: usize) -> Vec<f64> {
    let mut v = vec![theta.rho[k], theta.delta[k]];
    v.extend_from_slice(&theta.mixing[k]);
    v
}

/// Solves the damped normal equations of one feature and returns the target parameters.
fn gauss_newton_target(matrix: &[f64], rhs: &[f64], current: &[f64]) -> Option<Vec<f64>> {
    let p = rhs.len();
    let h = DMatrix::from_row_slice(p, p, matrix);
    let max_diag = (0..p).map(|i| h[(i, i)]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    // Levenberg damping towards the current parameters
    let lambda = 1e-6;
    let mut damped = h.clone();
    let mut b = DVector::from_column_slice(rhs);
    for i in 0..p {
        let extra = lambda * h[(i, i)] + 1e-10 * max_diag;
        damped[(i, i)] += extra;
        b[i] += extra * current[i];
    }
    let chol = damped.cholesky()?;
    let sol = chol.solve(&b);
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

/// Stochastic-approximation M-step.
///
/// Blends `fresh` into `smoothed`, re-estimates the noise level and the prior
/// scales of `ξ` and `τ` in closed form, and moves `(ρ, δ, A)` one bounded
/// Gauss–Newton step. `t0` stays at its initial value: it is redundant with
/// `δ` and `τ`, and fixing it pins the pace pivot.
pub fn update_theta(
    smoothed: &mut SufficientStats,
    fresh: &SufficientStats,
    theta: &FixedEffects,
    step: f64,
) -> FixedEffects {
    smoothed.blend(fresh, step);
    let mut next = theta.clone();

    next.sigma = if smoothed.n_obs > 0.0 {
        (smoothed.sum_sq_residual / smoothed.n_obs).max(0.0).sqrt()
    } else {
        theta.sigma
    };
    next.sigma = next.sigma.max(SIGMA_FLOOR);
    if smoothed.n_patients > 0.0 {
        next.prior_xi_std = (smoothed.sum_xi_sq / smoothed.n_patients)
            .sqrt()
            .max(PRIOR_STD_FLOOR);
        next.prior_tau_std = (smoothed.sum_tau_sq / smoothed.n_patients)
            .sqrt()
            .max(PRIOR_STD_FLOOR);
    }

    let ns = theta.n_sources();
    for k in 0..theta.dim() {
        let current = feature_params(theta, k);
        let Some(target) =
            gauss_newton_target(&smoothed.normal_matrix[k], &smoothed.normal_rhs[k], &current)
        else {
            continue;
        };
        let rho = theta.rho[k];
        let d_rho = (target[0] - rho).clamp(-0.5 * rho, 0.5 * rho);
        next.rho[k] = (rho + d_rho).max(RHO_FLOOR);
        next.delta[k] = theta.delta[k] + (target[1] - theta.delta[k]).clamp(-MAX_DELTA_STEP, MAX_DELTA_STEP);
        for l in 0..ns {
            let a = theta.mixing[k][l];
            next.mixing[k][l] = a + (target[2 + l] - a).clamp(-MAX_MIXING_STEP, MAX_MIXING_STEP);
        }
    }
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub step: f64,
    pub sigma: f64,
    pub data_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEffects {
    pub id: String,
    pub effects: RandomEffects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub xi: f64,
    pub tau: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub feature_names: Vec<String>,
    pub theta: FixedEffects,
    pub z_chain_last: Vec<PatientEffects>,
    pub trace: Vec<TraceEntry>,
    pub acceptance: AcceptanceRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub trace: Vec<TraceEntry>,
    pub acceptance: AcceptanceRates,
    pub z_chain_last: Vec<PatientEffects>,
}

/// Versioned on-disk form of a [`CalibrationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDocument {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub theta: FixedEffects,
    pub diagnostics: CalibrationDiagnostics,
}

impl CalibrationResult {
    pub fn to_document(&self) -> CalibrationDocument {
        CalibrationDocument {
            version: CALIBRATION_SCHEMA_VERSION,
            feature_names: self.feature_names.clone(),
            theta: self.theta.clone(),
            diagnostics: CalibrationDiagnostics {
                trace: self.trace.clone(),
                acceptance: self.acceptance.clone(),
                z_chain_last: self.z_chain_last.clone(),
            },
        }
    }

    pub fn from_document(doc: CalibrationDocument) -> Result<Self> {
        if doc.version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::data(
                "calibration document",
                format!("unsupported version {}", doc.version),
            ));
        }
        doc.theta.validate()?;
        Ok(CalibrationResult {
            feature_names: doc.feature_names,
            theta: doc.theta,
            z_chain_last: doc.diagnostics.z_chain_last,
            trace: doc.diagnostics.trace,
            acceptance: doc.diagnostics.acceptance,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn random_effects(&self) -> Vec<RandomEffects> {
        self.z_chain_last.iter().map(|p| p.effects.clone()).collect()
    }
}

/// Neutral starting point: everything centred on the mean observed age.
pub fn initial_theta(ds: &Dataset, n_sources: usize) -> FixedEffects {
    let (sum, n) = ds
        .patients
        .iter()
        .flat_map(|p| p.visits.iter())
        .fold((0.0, 0usize), |(s, n), v| (s + v.age, n + 1));
    let t0 = sum / n as f64;
    let d = ds.dim();
    FixedEffects {
        t0,
        rho: vec![1.0; d],
        delta: vec![t0; d],
        mixing: vec![vec![0.0; n_sources]; d],
        sigma: 0.1,
        prior_xi_std: 0.5,
        prior_tau_std: 5.0,
        prior_s_std: 1.0,
    }
}

struct SweepOutcome {
    z: RandomEffects,
    log_likelihood: f64,
    accepted: [u32; 3],
}

fn sweep_patient(
    y: &PatientSeries,
    z: RandomEffects,
    theta: &FixedEffects,
    cfg: &SaemConfig,
    iteration: usize,
    patient: usize,
) -> SweepOutcome {
    let mut rng = rng::stream(cfg.seed, &[iteration as u64, patient as u64]);
    let mut ll = individual_log_likelihood(y, &z, theta);
    let mut z = z;
    let mut accepted = [0u32; 3];
    for _ in 0..cfg.mh_sweeps {
        for (b, block) in Block::ALL.into_iter().enumerate() {
            if block == Block::Sources && z.s.is_empty() {
                continue;
            }
            let std = match block {
                Block::Xi => cfg.proposal_stds.xi,
                Block::Tau => cfg.proposal_stds.tau,
                Block::Sources => cfg.proposal_stds.s,
            };
            let (nz, nll, acc) = mh_step_cached(y, z, ll, theta, block, std, &mut rng);
            z = nz;
            ll = nll;
            accepted[b] += acc as u32;
        }
    }
    SweepOutcome {
        z,
        log_likelihood: ll,
        accepted,
    }
}

/// Runs MCMC-SAEM on `estimation_set`.
pub fn calibrate(estimation_set: &Dataset, cfg: &SaemConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    if estimation_set.is_empty() {
        return Err(Error::config("estimation set is empty"));
    }
    estimation_set.validate()?;
    let d = estimation_set.dim();
    let ns = cfg.n_sources_for(d);
    if ns > d {
        return Err(Error::config(format!("N_s = {ns} exceeds feature dimension {d}")));
    }

    let mut theta = initial_theta(estimation_set, ns);
    let mut zs = vec![RandomEffects::zeros(ns); estimation_set.len()];
    let mut smoothed = SufficientStats::zeros(d, ns);
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut accepted_total = [0u64; 3];

    for k in 1..=cfg.n_iter {
        let outcomes: Vec<SweepOutcome> = estimation_set
            .patients
            .par_iter()
            .zip(zs.par_iter())
            .enumerate()
            .map(|(i, (y, z))| sweep_patient(y, z.clone(), &theta, cfg, k, i))
            .collect();
        for (i, out) in outcomes.iter().enumerate() {
            if !out.log_likelihood.is_finite() || !out.z.is_finite() {
                return Err(Error::numerical(
                    "calibration",
                    format!(
                        "non-finite likelihood for patient {} at iteration {k}",
                        estimation_set.patients[i].id
                    ),
                ));
            }
            for b in 0..3 {
                accepted_total[b] += out.accepted[b] as u64;
            }
        }
        zs = outcomes.into_iter().map(|o| o.z).collect();

        let fresh = SufficientStats::of_cohort(estimation_set, &zs, &theta);
        let noise = theta.noise();
        let data_ll = -0.5 * fresh.sum_sq_residual / (noise.sigma * noise.sigma)
            + fresh.n_obs * crate::model::gaussian_log_normalizer(1, noise.sigma);
        let step = step_size(k, cfg);
        theta = update_theta(&mut smoothed, &fresh, &theta, step);
        if theta.validate().is_err() || !data_ll.is_finite() {
            return Err(Error::numerical(
                "calibration",
                format!("fixed effects became invalid at iteration {k}"),
            ));
        }
        trace.push(TraceEntry {
            iteration: k,
            step,
            sigma: theta.sigma,
            data_log_likelihood: data_ll,
        });
    }

    let sweeps = (cfg.n_iter * cfg.mh_sweeps * estimation_set.len()) as f64;
    let acceptance = AcceptanceRates {
        xi: accepted_total[0] as f64 / sweeps,
        tau: accepted_total[1] as f64 / sweeps,
        s: if ns == 0 {
            0.0
        } else {
            accepted_total[2] as f64 / sweeps
        },
    };
    let z_chain_last = estimation_set
        .patients
        .iter()
        .zip(zs)
        .map(|(p, effects)| PatientEffects {
            id: p.id.clone(),
            effects,
        })
        .collect();
    log::debug!(
        "calibration finished: sigma={:.4} acceptance xi={:.2} tau={:.2} s={:.2}",
        theta.sigma,
        acceptance.xi,
        acceptance.tau,
        acceptance.s
    );
    Ok(CalibrationResult {
        feature_names: estimation_set.feature_names(),
        theta,
        z_chain_last,
        trace,
        acceptance,
    })
}

/// Data log-likelihood of a cohort at given random effects; used by diagnostics.
pub fn cohort_data_log_likelihood(ds: &Dataset, zs: &[RandomEffects], theta: &FixedEffects) -> f64 {
    ds.patients
        .iter()
        .zip(zs)
        .map(|(y, z)| data_log_likelihood(y, z, theta))
        .sum()
}
