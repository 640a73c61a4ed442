use serde::{Deserialize, Serialize};

use crate::cohort::PredictionPair;
use crate::error::{Error, Result};
use crate::model::Dataset;

pub const N_BINS: usize = 30;

/// Mean absolute error on the normalized scale.
pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::contract(format!(
            "mae needs equal non-zero lengths (got {} and {})",
            predictions.len(),
            targets.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Last observed value of the target feature among the inputs (no-change hypothesis).
pub fn constant_baseline(pair: &PredictionPair) -> Option<f64> {
    pair.input_visits
        .iter()
        .rev()
        .find_map(|v| v.value(pair.target_feature))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub mae: Option<f64>,
    pub n_used: usize,
    /// Pairs whose inputs never observe the target feature.
    pub n_excluded: usize,
}

impl BaselineSummary {
    pub fn of(pairs: &[PredictionPair]) -> Self {
        let (preds, targets): (Vec<f64>, Vec<f64>) = pairs
            .iter()
            .filter_map(|p| constant_baseline(p).map(|b| (b, p.target_value)))
            .unzip();
        BaselineSummary {
            mae: mae(&preds, &targets).ok(),
            n_used: preds.len(),
            n_excluded: pairs.len() - preds.len(),
        }
    }
}

/// MAE of a centred Gaussian with the given raw-scale std, on the normalized scale.
pub fn noise_floor(raw_std: f64, raw_max: f64) -> f64 {
    raw_std / raw_max * (2.0 / std::f64::consts::PI).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistribution {
    pub name: String,
    pub present: bool,
    pub n_real: usize,
    pub n_simulated: usize,
    pub real_histogram: Vec<usize>,
    pub simulated_histogram: Vec<usize>,
    /// Empirical CDFs evaluated at the right bin edges.
    pub real_cdf: Vec<f64>,
    pub simulated_cdf: Vec<f64>,
    pub ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub bin_edges: Vec<f64>,
    pub features: Vec<FeatureDistribution>,
}

impl DistributionReport {
    pub fn max_ks(&self) -> Option<f64> {
        self.features.iter().filter_map(|f| f.ks).reduce(f64::max)
    }

    /// Tidy CSV: one row per feature × bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,bin_lo,bin_hi,real_count,sim_count,real_cdf,sim_cdf\n");
        for f in self.features.iter().filter(|f| f.present) {
            for b in 0..N_BINS {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    f.name,
                    self.bin_edges[b],
                    self.bin_edges[b + 1],
                    f.real_histogram[b],
                    f.simulated_histogram[b],
                    f.real_cdf[b],
                    f.simulated_cdf[b]
                ));
            }
        }
        out
    }
}

fn pooled(ds: &Dataset, k: usize) -> Vec<f64> {
    ds.patients
        .iter()
        .flat_map(|p| p.visits.iter())
        .filter_map(|v| v.value(k))
        .collect()
}

fn histogram(values: &[f64]) -> Vec<usize> {
    let mut h = vec![0; N_BINS];
    for &v in values {
        let b = ((v * N_BINS as f64).floor() as isize).clamp(0, N_BINS as isize - 1) as usize;
        h[b] += 1;
    }
    h
}

fn cdf(hist: &[usize], n: usize) -> Vec<f64> {
    hist.iter()
        .scan(0usize, |acc, &c| {
            *acc += c;
            Some(if n == 0 { 0.0 } else { *acc as f64 / n as f64 })
        })
        .collect()
}

/// Per-feature histograms, CDFs and KS statistic of pooled visit values.
pub fn distribution_report(real: &Dataset, simulated: &Dataset) -> Result<DistributionReport> {
    if real.feature_names() != simulated.feature_names() {
        return Err(Error::contract("distribution report needs the same feature set"));
    }
    let bin_edges = (0..=N_BINS).map(|b| b as f64 / N_BINS as f64).collect();
    let features = real
        .features
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let r = pooled(real, k);
            let s = pooled(simulated, k);
            let present = !r.is_empty() && !s.is_empty();
            let (rh, sh) = (histogram(&r), histogram(&s));
            FeatureDistribution {
                name: spec.name.clone(),
                present,
                n_real: r.len(),
                n_simulated: s.len(),
                real_cdf: cdf(&rh, r.len()),
                simulated_cdf: cdf(&sh, s.len()),
                real_histogram: rh,
                simulated_histogram: sh,
                ks: present.then(|| ks_statistic(&r, &s)),
            }
        })
        .collect();
    Ok(DistributionReport {
        bin_edges,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, FeatureSpec, PatientSeries, Visit};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.1, 0.5], &[0.1, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(mae(&[0.2, 0.4], &[0.1, 0.7]).unwrap(), 0.2, epsilon = 1e-15);
        assert!(mae(&[0.1], &[0.1, 0.2]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn mae_matches_two_pass_oracle() {
        let mut rng = crate::rng::stream(1, &[]);
        let p: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let mut diffs = Vec::new();
        for i in 0..1000 {
            diffs.push((p[i] - t[i]).abs());
        }
        let mut acc = 0.0;
        for d in &diffs {
            acc += d;
        }
        assert_abs_diff_eq!(mae(&p, &t).unwrap(), acc / 1000.0, epsilon = 1e-15);
    }

    fn pair(values: &[Option<f64>]) -> PredictionPair {
        let visits: Vec<Visit> = values
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(x) => Visit::new(70.0 + i as f64, vec![*x, 0.1], vec![true, true]).unwrap(),
                None => Visit::new(70.0 + i as f64, vec![0.0, 0.1], vec![false, true]).unwrap(),
            })
            .collect();
        let n = visits.len();
        PredictionPair {
            patient_id: "p".into(),
            input_visits: visits,
            target_age: 75.0,
            target_value: 0.6,
            target_feature: 0,
            delta_t: 2.0,
            last_input_index: n - 1,
            target_index: n + 1,
        }
    }

    #[test]
    fn baseline_carries_last_observation_forward() {
        assert_eq!(constant_baseline(&pair(&[Some(0.2), Some(0.3)])), Some(0.3));
        assert_eq!(constant_baseline(&pair(&[Some(0.4)])), Some(0.4));
        assert_eq!(constant_baseline(&pair(&[Some(0.2), None])), Some(0.2));
        assert_eq!(constant_baseline(&pair(&[None])), None);

        let pairs = vec![pair(&[Some(0.2), Some(0.5)]), pair(&[Some(0.1)]), pair(&[None])];
        let summary = BaselineSummary::of(&pairs);
        // |0.5 − 0.6| and |0.1 − 0.6|
        assert_abs_diff_eq!(summary.mae.unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!((summary.n_used, summary.n_excluded), (2, 1));
    }

    #[test]
    fn noise_floor_examples() {
        assert_abs_diff_eq!(noise_floor(1.3, 30.0), 0.0346, epsilon = 1e-4);
        assert_abs_diff_eq!(noise_floor(2.8, 30.0), 0.0745, epsilon = 1e-4);
        assert_eq!(noise_floor(0.0, 30.0), 0.0);
    }

    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        let mut d: f64 = 0.0;
        for &x in a.iter().chain(b) {
            let fa = a.iter().filter(|&&v| v <= x).count() as f64 / a.len() as f64;
            let fb = b.iter().filter(|&&v| v <= x).count() as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn ks_examples() {
        let a = [0.1, 0.2, 0.2, 0.5];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.2, 0.4], &[0.6, 0.8, 1.0]), 1.0);
        let mut rng = crate::rng::stream(4, &[]);
        for _ in 0..20 {
            // rounded values so ties are common
            let a: Vec<f64> = (0..37).map(|_| (rng.random::<f64>() * 10.0).round() / 10.0).collect();
            let b: Vec<f64> = (0..23).map(|_| (rng.random::<f64>() * 12.0).round() / 12.0).collect();
            assert_abs_diff_eq!(ks_statistic(&a, &b), brute_ks(&a, &b), epsilon = 1e-15);
        }
    }

    #[test]
    fn report_flags_absent_features() {
        let features = vec![
            FeatureSpec::new("a", 1.0, Direction::Increasing).unwrap(),
            FeatureSpec::new("b", 1.0, Direction::Increasing).unwrap(),
        ];
        let ds = Dataset::new(
            vec![PatientSeries::new(
                "p",
                vec![Visit::new(70.0, vec![0.5, 0.0], vec![true, false]).unwrap()],
            )
            .unwrap()],
            features,
        )
        .unwrap();
        let r = distribution_report(&ds, &ds).unwrap();
        assert_eq!(r.features[0].ks, Some(0.0));
        assert!(!r.features[1].present);
        assert_eq!(r.features[0].real_histogram[15], 1);
        assert_eq!(*r.features[0].real_cdf.last().unwrap(), 1.0);
    }
}
