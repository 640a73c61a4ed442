mod common;

use common::*;
use vcohort::calibration::{calibrate, SaemConfig};
use vcohort::eval::VisitPlan;
use vcohort::model::individual_log_likelihood;
use vcohort::personalize::{batch_personalize, personalize, PersonalizeConfig};
use vcohort::{Dataset, PatientSeries, RandomEffects, Visit};

fn quick_saem(seed: u64) -> SaemConfig {
    SaemConfig {
        n_iter: 80,
        n_burn_in: 40,
        seed,
        ..Default::default()
    }
}

#[test]
fn calibration_is_seed_deterministic() {
    let ds = cohort(40, &annual_plan(5), 0.2, 11);
    let a = calibrate(&ds, &quick_saem(3)).unwrap();
    let b = calibrate(&ds, &quick_saem(3)).unwrap();
    let c = calibrate(&ds, &quick_saem(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.trace, c.trace);
}

#[test]
fn single_visit_cohort_completes() {
    let ds = Dataset::new(
        vec![PatientSeries::new("only", vec![Visit::observed(70.0, vec![0.3, 0.5, 0.7]).unwrap()]).unwrap()],
        vcohort::eval::feature_specs(3),
    )
    .unwrap();
    let cal = calibrate(&ds, &quick_saem(0)).unwrap();
    assert!(cal.theta.sigma.is_finite() && cal.theta.sigma > 0.0);
    assert!(cal.trace.iter().all(|e| e.sigma.is_finite() && e.sigma > 0.0));
}

#[test]
fn noiseless_trace_trends_upward() {
    let (ds, _) = cohort_with_effects(&with_sigma(1e-12), 60, &annual_plan(6), 12);
    let cal = calibrate(&ds, &quick_saem(5)).unwrap();
    let ll: Vec<f64> = cal.trace.iter().map(|e| e.data_log_likelihood).collect();
    let head = ll[..10].iter().sum::<f64>() / 10.0;
    let tail = ll[ll.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail >= head, "{head} -> {tail}");
    assert!(cal.trace.iter().all(|e| e.sigma.is_finite() && e.sigma > 0.0));
}

fn max_abs_err(a: &RandomEffects, b: &RandomEffects) -> f64 {
    a.to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn batch_recovery_on_two_hundred_patients() {
    let (ds, truth) = cohort_with_effects(&with_sigma(1e-12), 200, &annual_plan(6), 13);
    let fitted = batch_personalize(&ds, &with_sigma(1e-4), &PersonalizeConfig::default()).unwrap();
    let mean = ds
        .patients
        .iter()
        .zip(&truth)
        .map(|(p, z)| max_abs_err(&fitted[&p.id].effects, z))
        .sum::<f64>()
        / 200.0;
    assert!(mean < 2e-3, "mean recovery error {mean:.2e}");
}

#[test]
fn restarts_never_hurt_and_output_is_feasible() {
    let plan = VisitPlan::annual(4, 73.0, 6.0);
    let ds = cohort(30, &plan, 0.3, 14);
    let theta = theta_star();
    let one = PersonalizeConfig {
        n_restarts: 1,
        seed: 9,
        ..Default::default()
    };
    let five = PersonalizeConfig {
        n_restarts: 5,
        ..one.clone()
    };
    for p in &ds.patients {
        let a = personalize(p, &theta, &one).unwrap();
        let b = personalize(p, &theta, &five).unwrap();
        assert!(b.log_likelihood >= a.log_likelihood - 1e-9, "{}", p.id);
        let at_zero = individual_log_likelihood(p, &RandomEffects::zeros(2), &theta);
        assert!(b.log_likelihood >= at_zero);
        let z = &b.effects;
        assert!(z.xi.abs() <= 3.0 && z.tau.abs() <= 15.0 && z.s.iter().all(|s| s.abs() <= 5.0));
    }
}
