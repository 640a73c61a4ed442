use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    eval_trajectory, Dataset, Direction, FeatureSpec, FixedEffects, PatientSeries, RandomEffects,
    Visit,
};
use crate::simulation::VisitCount;

/// How synthetic patients are followed up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitPlan {
    pub n_visits: VisitCount,
    pub spacing: f64,
    /// Each interval is `spacing + U(−jitter, jitter)`.
    pub spacing_jitter: f64,
    pub baseline_age_mean: f64,
    pub baseline_age_std: f64,
}

impl VisitPlan {
    pub fn annual(n_visits: usize, baseline_age_mean: f64, baseline_age_std: f64) -> Self {
        VisitPlan {
            n_visits: VisitCount::Fixed(n_visits),
            spacing: 1.0,
            spacing_jitter: 0.0,
            baseline_age_mean,
            baseline_age_std,
        }
    }

    fn validate(&self) -> Result<()> {
        self.n_visits.validate()?;
        if !(self.spacing > 0.0) || !(self.spacing_jitter >= 0.0) || self.spacing_jitter >= self.spacing {
            return Err(Error::config("visit plan needs spacing > jitter ≥ 0"));
        }
        if !(self.baseline_age_std >= 0.0) {
            return Err(Error::config("baseline_age_std must be ≥ 0"));
        }
        Ok(())
    }
}

/// Generic `feature_k` specs on an already-normalized scale.
pub fn feature_specs(d: usize) -> Vec<FeatureSpec> {
    (0..d)
        .map(|k| FeatureSpec {
            name: format!("feature_{k}"),
            raw_max: 1.0,
            direction: Direction::Increasing,
        })
        .collect()
}

/// Ground-truth cohort from `theta_star`, returned together with the drawn random effects.
///
/// Random effects come from the priors stored in `theta_star`; values get
/// `N(0, σ²)` noise (clamped to `[0, 1]`), then each value is hidden with
/// probability `missing_rate` while keeping at least one observed per visit.
pub fn synth_cohort_with_effects<R: Rng + ?Sized>(
    theta_star: &FixedEffects,
    n_patients: usize,
    plan: &VisitPlan,
    missing_rate: f64,
    rng: &mut R,
) -> Result<(Dataset, Vec<RandomEffects>)> {
    theta_star.validate()?;
    plan.validate()?;
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::config(format!("missing rate {missing_rate} outside [0, 1)")));
    }
    let d = theta_star.dim();
    let ns = theta_star.n_sources();
    let noise = theta_star.noise();
    let normal = |rng: &mut R| -> f64 { rng.sample(rand_distr::StandardNormal) };
    let mut patients = Vec::with_capacity(n_patients);
    let mut effects = Vec::with_capacity(n_patients);
    for i in 0..n_patients {
        let z = RandomEffects {
            xi: theta_star.prior_xi_std * normal(rng),
            tau: theta_star.prior_tau_std * normal(rng),
            s: (0..ns).map(|_| theta_star.prior_s_std * normal(rng)).collect(),
        };
        let n_visits = plan.n_visits.sample(rng);
        let mut age = plan.baseline_age_mean + plan.baseline_age_std * normal(rng);
        let mut visits = Vec::with_capacity(n_visits);
        for j in 0..n_visits {
            if j > 0 {
                let jitter = if plan.spacing_jitter > 0.0 {
                    rng.random_range(-plan.spacing_jitter..plan.spacing_jitter)
                } else {
                    0.0
                };
                age += plan.spacing + jitter;
            }
            let mut values = eval_trajectory(theta_star, &z, age)?;
            for v in values.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
            let mut mask: Vec<bool> = (0..d).map(|_| rng.random::<f64>() >= missing_rate).collect();
            if !mask.iter().any(|&m| m) {
                mask[rng.random_range(0..d)] = true;
            }
            visits.push(Visit::new(age, values, mask)?);
        }
        patients.push(PatientSeries::new(format!("p{i:05}"), visits)?);
        effects.push(z);
    }
    Ok((Dataset::new(patients, feature_specs(d))?, effects))
}

pub fn synth_cohort<R: Rng + ?Sized>(
    theta_star: &FixedEffects,
    n_patients: usize,
    plan: &VisitPlan,
    missing_rate: f64,
    rng: &mut R,
) -> Result<Dataset> {
    synth_cohort_with_effects(theta_star, n_patients, plan, missing_rate, rng).map(|(ds, _)| ds)
}
