#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, Ordering};

use vcohort::eval::{synth_cohort, synth_cohort_with_effects, VisitPlan};
use vcohort::rng::stream;
use vcohort::simulation::VisitCount;
use vcohort::{Dataset, FixedEffects, RandomEffects};

/// Ground truth for the synthetic benchmark: four features, two sources.
pub fn theta_star() -> FixedEffects {
    FixedEffects {
        t0: 73.0,
        rho: vec![0.35, 0.3, 0.45, 0.3],
        delta: vec![71.0, 73.0, 74.5, 76.0],
        mixing: vec![
            vec![0.4, 0.0],
            vec![-0.3, 0.4],
            vec![0.0, -0.5],
            vec![0.25, 0.25],
        ],
        sigma: 0.03,
        prior_xi_std: 0.3,
        prior_tau_std: 3.0,
        prior_s_std: 1.0,
    }
}

pub fn with_sigma(sigma: f64) -> FixedEffects {
    FixedEffects {
        sigma,
        ..theta_star()
    }
}

pub fn annual_plan(n_visits: usize) -> VisitPlan {
    VisitPlan::annual(n_visits, 73.0, 3.0)
}

/// Mostly short follow-up, so few patients qualify for long-horizon pairs.
pub fn starved_plan() -> VisitPlan {
    VisitPlan {
        n_visits: VisitCount::Weighted(vec![(2, 0.35), (3, 0.35), (4, 0.1), (5, 0.1), (6, 0.1)]),
        spacing: 1.0,
        spacing_jitter: 0.1,
        baseline_age_mean: 73.0,
        baseline_age_std: 3.0,
    }
}

pub fn cohort(n: usize, plan: &VisitPlan, missing: f64, seed: u64) -> Dataset {
    synth_cohort(&theta_star(), n, plan, missing, &mut stream(seed, &[])).unwrap()
}

pub fn cohort_with_effects(
    theta: &FixedEffects,
    n: usize,
    plan: &VisitPlan,
    seed: u64,
) -> (Dataset, Vec<RandomEffects>) {
    synth_cohort_with_effects(theta, n, plan, 0.0, &mut stream(seed, &[])).unwrap()
}

/// Set by [`report`] so the acceptance runner knows a verdict line was printed.
pub static REPORTED: AtomicBool = AtomicBool::new(false);

pub fn report(criterion: u32, pass: bool, detail: impl std::fmt::Display) {
    REPORTED.store(true, Ordering::SeqCst);
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}
