//! MAP random effects for individual patients under fixed θ.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    gradient_log_likelihood, individual_log_likelihood, Dataset, FixedEffects, PatientSeries,
    RandomEffects,
};
use crate::optim::{self, LbfgsbOptions, Termination};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizeConfig {
    pub max_evals: usize,
    pub grad_tol: f64,
    pub xi_bounds: Bounds,
    pub tau_bounds: Bounds,
    pub s_bounds: Bounds,
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            max_evals: 500,
            grad_tol: 1e-6,
            xi_bounds: Bounds::new(-3.0, 3.0),
            tau_bounds: Bounds::new(-15.0, 15.0),
            s_bounds: Bounds::new(-5.0, 5.0),
            n_restarts: 3,
            seed: 0,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("xi", self.xi_bounds),
            ("tau", self.tau_bounds),
            ("s", self.s_bounds),
        ] {
            if !(b.lo < b.hi) {
                return Err(Error::config(format!("{name} bounds need lo < hi")));
            }
        }
        if self.max_evals == 0 || self.n_restarts == 0 {
            return Err(Error::config("max_evals and n_restarts must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::config("grad_tol must be positive"));
        }
        Ok(())
    }

    fn packed_bounds(&self, n_sources: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.xi_bounds.lo, self.tau_bounds.lo];
        let mut hi = vec![self.xi_bounds.hi, self.tau_bounds.hi];
        lo.extend(std::iter::repeat_n(self.s_bounds.lo, n_sources));
        hi.extend(std::iter::repeat_n(self.s_bounds.hi, n_sources));
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Personalized {
    pub effects: RandomEffects,
    pub log_likelihood: f64,
    /// Set when every restart failed to leave its starting point.
    pub warning: Option<String>,
}

/// Maximizes the individual complete log-likelihood of `y` over a box.
///
/// The first start is the prior mode; the remaining `n_restarts − 1` starts are
/// prior draws from a stream that depends only on `cfg.seed`.
pub fn personalize(
    y: &PatientSeries,
    theta: &FixedEffects,
    cfg: &PersonalizeConfig,
) -> Result<Personalized> {
    cfg.validate()?;
    theta.validate()?;
    y.validate()?;
    if y.visits[0].dim() != theta.dim() {
        return Err(Error::contract(format!(
            "patient {} has {} features, model has {}",
            y.id,
            y.visits[0].dim(),
            theta.dim()
        )));
    }
    let ns = theta.n_sources();
    let (lo, hi) = cfg.packed_bounds(ns);
    let opts = LbfgsbOptions {
        max_evals: cfg.max_evals,
        grad_tol: cfg.grad_tol,
        ..Default::default()
    };
    let objective = |x: &[f64]| {
        let z = RandomEffects::from_slice(x);
        let value = -individual_log_likelihood(y, &z, theta);
        let grad = gradient_log_likelihood(y, &z, theta)
            .into_iter()
            .map(|g| -g)
            .collect();
        (value, grad)
    };

    let mut prior_mode = vec![0.0_f64; 2 + ns];
    for ((v, &l), &h) in prior_mode.iter_mut().zip(&lo).zip(&hi) {
        *v = v.clamp(l, h);
    }

    let mut rng = rng::stream(cfg.seed, &[0x7e57]);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut all_failed = true;
    for restart in 0..cfg.n_restarts {
        let start: Vec<f64> = if restart == 0 {
            prior_mode.clone()
        } else {
            let mut normal = || -> f64 { rng.sample(rand_distr::StandardNormal) };
            let mut x = vec![theta.prior_xi_std * normal(), theta.prior_tau_std * normal()];
            x.extend((0..ns).map(|_| theta.prior_s_std * normal()));
            x.iter_mut()
                .zip(lo.iter().zip(&hi))
                .for_each(|(v, (&l, &h))| *v = v.clamp(l, h));
            x
        };
        let min = optim::minimize(objective, &start, &lo, &hi, &opts);
        let failed = min.termination == Termination::LineSearchFailed && min.n_iters == 0;
        all_failed &= failed;
        if !min.value.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(_, v)| min.value < *v) {
            best = Some((min.x, min.value));
        }
    }

    let (prior_value, _) = objective(&prior_mode);
    let (x, value, warning) = match best {
        Some((x, v)) if !all_failed && v <= prior_value => (x, v, None),
        _ => (
            prior_mode,
            prior_value,
            Some(format!(
                "patient {}: optimizer made no progress, returning the prior mode",
                y.id
            )),
        ),
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(Personalized {
        effects: RandomEffects::from_slice(&x),
        log_likelihood: -value,
        warning,
    })
}

/// Personalizes every patient independently; results are keyed by patient id.
///
/// Per-patient failures are recorded as warnings and never abort the batch.
pub fn batch_personalize(
    dataset: &Dataset,
    theta: &FixedEffects,
    cfg: &PersonalizeConfig,
) -> Result<BTreeMap<String, Personalized>> {
    cfg.validate()?;
    theta.validate()?;
    let results: Vec<(String, Personalized)> = dataset
        .patients
        .par_iter()
        .map(|p| {
            let out = personalize(p, theta, cfg).unwrap_or_else(|e| {
                let prior = RandomEffects::zeros(theta.n_sources());
                Personalized {
                    log_likelihood: individual_log_likelihood(p, &prior, theta),
                    effects: prior,
                    warning: Some(format!("patient {}: {e}", p.id)),
                }
            });
            (p.id.clone(), out)
        })
        .collect();
    Ok(results.into_iter().collect())
}
