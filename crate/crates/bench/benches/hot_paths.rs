use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vcohort::model::{gradient_log_likelihood, individual_log_likelihood};
use vcohort::personalize::{personalize, PersonalizeConfig};
use vcohort::predictor::loss_and_gradients;
use vcohort::rng::stream;
use vcohort::simulation::{fit_kde, sample_kde};
use vcohort_bench::{cohort, lstm_batch, temporal_points, theta};

fn likelihood(c: &mut Criterion) {
    let (ds, zs) = cohort(1, 6);
    let th = theta();
    let (y, z) = (&ds.patients[0], &zs[0]);
    c.bench_function("log_likelihood/6_visits", |b| {
        b.iter(|| individual_log_likelihood(black_box(y), black_box(z), &th))
    });
    c.bench_function("gradient/6_visits", |b| {
        b.iter(|| gradient_log_likelihood(black_box(y), black_box(z), &th))
    });
}

fn lstm(c: &mut Criterion) {
    let (params, batch) = lstm_batch(6, 10, 32, 5);
    c.bench_function("lstm_loss_and_gradients/batch_32", |b| {
        b.iter(|| loss_and_gradients(black_box(&params), black_box(&batch)))
    });
}

fn kde(c: &mut Criterion) {
    let model = fit_kde(&temporal_points(200)).unwrap();
    let mut rng = stream(4, &[]);
    c.bench_function("kde_sample/200_points", |b| {
        b.iter(|| sample_kde(black_box(&model), &mut rng))
    });
}

fn personalization(c: &mut Criterion) {
    let (ds, _) = cohort(1, 6);
    let th = theta();
    let cfg = PersonalizeConfig::default();
    c.bench_function("personalize/6_visits_3_restarts", |b| {
        b.iter(|| personalize(black_box(&ds.patients[0]), &th, &cfg).unwrap())
    });
}

criterion_group!(benches, likelihood, lstm, kde, personalization);
criterion_main!(benches);
