mod common;

use std::collections::BTreeMap;

use rand::Rng;
use vcohort::cohort::{admissible_pairs, split_delta_t, PredictionPair};
use vcohort::predictor::{predict, train, TrainConfig};
use vcohort::rng::stream;
use vcohort::{Dataset, PatientSeries, Visit};

fn patient(id: &str, ages: &[f64]) -> PatientSeries {
    let visits = ages.iter().map(|&a| Visit::observed(a, vec![0.5, 0.5]).unwrap()).collect();
    PatientSeries::new(id, visits).unwrap()
}

#[test]
fn split_choices_are_uniform_over_admissible_pairs() {
    let ds = Dataset::new(
        vec![
            patient("a", &[60.0, 61.0, 62.0, 63.0, 64.0, 65.0]),
            patient("b", &[60.0, 62.0, 64.0]),
            patient("c", &[60.0, 60.5, 61.0, 62.5, 63.0]),
            patient("d", &[60.0, 61.0]),
            patient("e", &[70.0, 72.0, 74.0, 76.0]),
        ],
        vcohort::eval::feature_specs(2),
    )
    .unwrap();
    let expected: BTreeMap<&str, Vec<(usize, usize)>> = ds
        .patients
        .iter()
        .map(|p| (p.id.as_str(), admissible_pairs(p, 2.0, 0.0, 1)))
        .collect();
    assert_eq!(expected["a"], vec![(0, 2), (1, 3), (2, 4), (3, 5)]);
    assert_eq!(expected["b"], vec![(0, 1), (1, 2)]);
    assert_eq!(expected["c"], vec![(1, 3), (2, 4)]);
    assert!(expected["d"].is_empty());
    assert_eq!(expected["e"], vec![(0, 1), (1, 2), (2, 3)]);

    let draws = 1000;
    let mut counts: BTreeMap<(String, usize, usize), usize> = BTreeMap::new();
    let mut rng = stream(21, &[]);
    for _ in 0..draws {
        let split = split_delta_t(&ds, 2.0, 0.0, 1, &mut rng).unwrap();
        assert_eq!(split.discarded_ids, vec!["d".to_string()]);
        for p in split.pairs {
            *counts.entry((p.patient_id, p.last_input_index, p.target_index)).or_default() += 1;
        }
    }
    for (id, options) in &expected {
        let q = 1.0 / options.len().max(1) as f64;
        let sd = (draws as f64 * q * (1.0 - q)).sqrt();
        for &(k, p) in options {
            let n = counts.get(&(id.to_string(), k, p)).copied().unwrap_or(0) as f64;
            assert!((n - draws as f64 * q).abs() <= 3.0 * sd, "{id} ({k},{p}): {n}");
        }
    }
    assert_eq!(counts.values().sum::<usize>(), 4 * draws);
}

/// The target is the last observed input value, so a perfect fit exists.
fn copy_task(n: usize, seed: u64) -> Vec<PredictionPair> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..5);
            let visits: Vec<Visit> = (0..len)
                .map(|j| Visit::observed(70.0 + j as f64, vec![rng.random_range(0.1..0.9)]).unwrap())
                .collect();
            let last = visits[len - 1].values[0];
            PredictionPair {
                patient_id: format!("p{i}"),
                target_age: visits[len - 1].age + 2.0,
                input_visits: visits,
                target_value: last,
                target_feature: 0,
                delta_t: 2.0,
                last_input_index: len - 1,
                target_index: len,
            }
        })
        .collect()
}

#[test]
fn lstm_learns_a_copy_task() {
    let train_pairs = copy_task(400, 1);
    let val_pairs = copy_task(100, 2);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 200,
        patience: 200,
        seed: 3,
        ..Default::default()
    };
    let (params, history) = train(&train_pairs, &val_pairs, &cfg).unwrap();
    assert!(history.epochs.len() <= 200);
    let mse = val_pairs
        .iter()
        .map(|p| (predict(&params, p).unwrap() - p.target_value).powi(2))
        .sum::<f64>()
        / val_pairs.len() as f64;
    assert!(mse < 1e-3, "validation MSE {mse}");
}
