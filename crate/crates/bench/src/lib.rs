//! Shared fixtures for the criterion benches.

use rand::Rng;
use vcohort::eval::{synth_cohort_with_effects, VisitPlan};
use vcohort::predictor::{LstmParams, Sample};
use vcohort::rng::stream;
use vcohort::{Dataset, FixedEffects, RandomEffects};

/// Four features, two sources, mid-range trajectories around age 73.
pub fn theta() -> FixedEffects {
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

pub fn cohort(n: usize, visits: usize) -> (Dataset, Vec<RandomEffects>) {
    synth_cohort_with_effects(
        &theta(),
        n,
        &VisitPlan::annual(visits, 73.0, 3.0),
        0.1,
        &mut stream(1, &[]),
    )
    .expect("fixture cohort")
}

/// Random LSTM and a batch of `n` sequences with `len` steps each.
pub fn lstm_batch(input_dim: usize, hidden: usize, n: usize, len: usize) -> (LstmParams, Vec<Sample>) {
    let mut rng = stream(2, &[]);
    let params = LstmParams::random(input_dim, hidden, &mut rng);
    let batch = (0..n)
        .map(|_| {
            let seq = (0..len)
                .map(|_| (0..input_dim).map(|_| rng.random::<f64>()).collect())
                .collect();
            (seq, rng.random::<f64>())
        })
        .collect();
    (params, batch)
}

/// (ξ, τ) pairs spread like a fitted cohort.
pub fn temporal_points(n: usize) -> Vec<(f64, f64)> {
    let mut rng = stream(3, &[]);
    (0..n)
        .map(|_| (rng.random_range(-0.5..0.5), rng.random_range(-5.0..5.0)))
        .collect()
}
