//! Cohort ingestion and the ΔT prediction-set construction.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FeatureSpec, PatientSeries, Visit};
use crate::simulation::SIM_ID_PREFIX;

/// Slack on the ΔT window so that exact grids (70 → 72 with tolerance 0) are admissible.
const AGE_EPS: f64 = 1e-9;

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a cohort CSV: `patient_id, age, <feature columns…>`, blank cells are missing.
pub fn load_dataset(path: impl AsRef<Path>, specs: &[FeatureSpec]) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, specs)
}

pub fn parse_dataset(text: &str, specs: &[FeatureSpec]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("patient_id").ok_or_else(|| Error::data("header", "missing patient_id column"))?;
    let age_col = col("age").ok_or_else(|| Error::data("header", "missing age column"))?;
    for h in headers.iter() {
        if h != "patient_id" && h != "age" && !specs.iter().any(|s| s.name == h) {
            return Err(Error::data("header", format!("unknown column {h:?}")));
        }
    }
    let feature_cols: Vec<usize> = specs
        .iter()
        .map(|s| {
            col(&s.name).ok_or_else(|| Error::data("header", format!("missing feature column {:?}", s.name)))
        })
        .collect::<Result<_>>()?;

    // BTreeMap keeps patient order deterministic (sorted by id)
    let mut rows: BTreeMap<String, Vec<(f64, Visit, usize)>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let loc = || format!("row {line}");
        let record = record?;
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::data(loc(), "empty patient_id"));
        }
        let age_text = record.get(age_col).unwrap_or("");
        let age: f64 = age_text
            .parse()
            .ok()
            .filter(|a: &f64| a.is_finite())
            .ok_or_else(|| Error::data(loc(), format!("non-numeric age {age_text:?}")))?;
        let mut values = vec![0.0; specs.len()];
        let mut mask = vec![false; specs.len()];
        for (k, (&c, spec)) in feature_cols.iter().zip(specs).enumerate() {
            let cell = record.get(c).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let raw: f64 = cell.parse().map_err(|_| {
                Error::data(loc(), format!("non-numeric value {cell:?} for {}", spec.name))
            })?;
            if !(0.0..=spec.raw_max).contains(&raw) {
                return Err(Error::data(
                    loc(),
                    format!("{} = {raw} outside [0, {}]", spec.name, spec.raw_max),
                ));
            }
            values[k] = spec.normalize(raw);
            mask[k] = true;
        }
        if !mask.iter().any(|&m| m) {
            log::warn!("{}: no observed feature, row skipped", loc());
            continue;
        }
        let visit = Visit { age, values, mask };
        rows.entry(id).or_default().push((age, visit, line));
    }

    let mut patients = Vec::with_capacity(rows.len());
    for (id, mut visits) in rows {
        visits.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = visits.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::data(
                format!("row {}", w[1].2),
                format!("duplicate age {} for patient {id}", w[1].0),
            ));
        }
        let visits = visits.into_iter().map(|(_, v, _)| v).collect();
        patients.push(PatientSeries::new(id, visits)?);
    }
    Dataset::new(patients, specs.to_vec())
}

/// Serializes a cohort back to raw-score CSV.
pub fn dataset_to_csv(ds: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["patient_id".to_string(), "age".to_string()];
    header.extend(ds.feature_names());
    w.write_record(&header)?;
    for p in &ds.patients {
        for v in &p.visits {
            let mut rec = vec![p.id.clone(), format!("{}", v.age)];
            for (k, spec) in ds.features.iter().enumerate() {
                rec.push(if v.mask[k] {
                    format!("{}", spec.denormalize(v.values[k]))
                } else {
                    String::new()
                });
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::data("csv writer", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_atomic(path.as_ref(), dataset_to_csv(ds)?.as_bytes())
}

/// One input-sequence / future-target example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub patient_id: String,
    pub input_visits: Vec<Visit>,
    pub target_age: f64,
    pub target_value: f64,
    pub target_feature: usize,
    pub delta_t: f64,
    /// Index of the last input visit in the source series.
    pub last_input_index: usize,
    pub target_index: usize,
}

impl PredictionPair {
    pub fn last_input_age(&self) -> f64 {
        self.input_visits[self.input_visits.len() - 1].age
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub pairs: Vec<PredictionPair>,
    pub discarded_ids: Vec<String>,
}

/// Every `(k, p*)` visit-index pair whose gap is within `tolerance` of `delta_t`
/// and whose target visit observes `feature`.
pub fn admissible_pairs(
    patient: &PatientSeries,
    delta_t: f64,
    tolerance: f64,
    feature: usize,
) -> Vec<(usize, usize)> {
    let v = &patient.visits;
    let mut out = Vec::new();
    for k in 0..v.len() {
        for p in (k + 1)..v.len() {
            let gap = v[p].age - v[k].age;
            if (gap - delta_t).abs() <= tolerance + AGE_EPS && v[p].mask[feature] {
                out.push((k, p));
            }
        }
    }
    out
}

pub fn is_eligible(patient: &PatientSeries, delta_t: f64, tolerance: f64, feature: usize) -> bool {
    !admissible_pairs(patient, delta_t, tolerance, feature).is_empty()
}

fn build_pair(
    patient: &PatientSeries,
    k: usize,
    p: usize,
    feature: usize,
    delta_t: f64,
) -> PredictionPair {
    PredictionPair {
        patient_id: patient.id.clone(),
        input_visits: patient.visits[..=k].to_vec(),
        target_age: patient.visits[p].age,
        target_value: patient.visits[p].values[feature],
        target_feature: feature,
        delta_t,
        last_input_index: k,
        target_index: p,
    }
}

/// Builds one prediction pair per eligible patient, picking the split uniformly at random.
pub fn split_delta_t<R: Rng + ?Sized>(
    ds: &Dataset,
    delta_t: f64,
    tolerance: f64,
    feature: usize,
    rng: &mut R,
) -> Result<SplitResult> {
    if !(delta_t > 0.0) || !(tolerance >= 0.0) {
        return Err(Error::config(format!(
            "need delta_t > 0 and tolerance ≥ 0 (got {delta_t}, {tolerance})"
        )));
    }
    if feature >= ds.dim() {
        return Err(Error::config(format!("feature index {feature} out of range")));
    }
    let mut pairs = Vec::new();
    let mut discarded_ids = Vec::new();
    for patient in &ds.patients {
        let options = admissible_pairs(patient, delta_t, tolerance, feature);
        if options.is_empty() {
            discarded_ids.push(patient.id.clone());
            continue;
        }
        let (k, p) = options[rng.random_range(0..options.len())];
        pairs.push(build_pair(patient, k, p, feature, delta_t));
    }
    Ok(SplitResult {
        pairs,
        discarded_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub last_input_index: usize,
    pub target_index: usize,
}

/// Auditable record of a split: which visits were used, which patients were dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub delta_t: f64,
    pub tolerance: f64,
    pub feature: String,
    pub pairs: Vec<ManifestEntry>,
    pub discarded_ids: Vec<String>,
}

impl SplitManifest {
    pub fn new(split: &SplitResult, delta_t: f64, tolerance: f64, feature: &str) -> Self {
        SplitManifest {
            delta_t,
            tolerance,
            feature: feature.to_string(),
            pairs: split
                .pairs
                .iter()
                .map(|p| ManifestEntry {
                    patient_id: p.patient_id.clone(),
                    last_input_index: p.last_input_index,
                    target_index: p.target_index,
                })
                .collect(),
            discarded_ids: split.discarded_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub delta_t: f64,
    pub tolerance: f64,
    pub feature: usize,
    pub test_fraction: f64,
    pub validation_fraction: f64,
}

impl PartitionScheme {
    pub fn validate(&self) -> Result<()> {
        let f = [self.test_fraction, self.validation_fraction];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || f.iter().sum::<f64>() > 1.0 {
            return Err(Error::config("partition fractions must be in [0,1] and sum to ≤ 1"));
        }
        if !(self.delta_t > 0.0 && self.tolerance >= 0.0) {
            return Err(Error::config("partition needs delta_t > 0 and tolerance ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub estimation: Dataset,
    pub test: Dataset,
    pub validation: Dataset,
    /// Estimation patients that were eligible for ΔT pairs (the standard training set).
    pub estimation_eligible_ids: Vec<String>,
    pub discarded_ids: Vec<String>,
}

/// Patient-level estimation/test/validation partition.
///
/// Patients without any admissible ΔT pair always go to estimation. The
/// eligible ones are shuffled; `floor(test_fraction·n)` go to test,
/// `floor(validation_fraction·n)` to validation, the rest to estimation.
pub fn partition<R: Rng + ?Sized>(
    ds: &Dataset,
    scheme: &PartitionScheme,
    rng: &mut R,
) -> Result<Partition> {
    scheme.validate()?;
    let (mut eligible, discarded): (Vec<&PatientSeries>, Vec<&PatientSeries>) = ds
        .patients
        .iter()
        .partition(|p| is_eligible(p, scheme.delta_t, scheme.tolerance, scheme.feature));
    eligible.shuffle(rng);
    let n = eligible.len();
    let n_test = (scheme.test_fraction * n as f64 + 1e-9).floor() as usize;
    let n_val = (scheme.validation_fraction * n as f64 + 1e-9).floor() as usize;
    let ids = |ps: &[&PatientSeries]| ps.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    let test_ids = ids(&eligible[..n_test]);
    let val_ids = ids(&eligible[n_test..n_test + n_val]);
    let est_eligible = ids(&eligible[n_test + n_val..]);
    let discarded_ids = ids(&discarded);
    if test_ids.is_empty() {
        return Err(Error::data(
            "partition",
            format!("empty test set ({n} eligible patients for ΔT = {})", scheme.delta_t),
        ));
    }
    let mut est_ids = discarded_ids.clone();
    est_ids.extend(est_eligible.iter().cloned());
    Ok(Partition {
        estimation: ds.subset(&est_ids),
        test: ds.subset(&test_ids),
        validation: ds.subset(&val_ids),
        estimation_eligible_ids: est_eligible,
        discarded_ids,
    })
}

/// True iff every training patient is simulated and none shares an id with the estimation set.
pub fn strict_simulated_training_guard(training: &Dataset, estimation_ids: &[String]) -> bool {
    let real: HashSet<&str> = estimation_ids.iter().map(String::as_str).collect();
    training
        .patients
        .iter()
        .all(|p| p.id.starts_with(SIM_ID_PREFIX) && !real.contains(p.id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Direction;
    use crate::rng;

    fn specs() -> Vec<FeatureSpec> {
        vec![
            FeatureSpec::new("MMSE", 30.0, Direction::Decreasing).unwrap(),
            FeatureSpec::new("ADAS11", 70.0, Direction::Increasing).unwrap(),
        ]
    }

    #[test]
    fn parses_fixture() {
        let text = "patient_id,age,MMSE,ADAS11\n\
                    b,71.5,15,\n\
                    a,70,30,7\n\
                    b,70.5,27,14\n";
        let ds = parse_dataset(text, &specs()).unwrap();
        let expect = Dataset {
            patients: vec![
                PatientSeries {
                    id: "a".into(),
                    visits: vec![Visit {
                        age: 70.0,
                        values: vec![0.0, 0.1],
                        mask: vec![true, true],
                    }],
                },
                PatientSeries {
                    id: "b".into(),
                    visits: vec![
                        Visit {
                            age: 70.5,
                            values: vec![1.0 - 27.0 / 30.0, 0.2],
                            mask: vec![true, true],
                        },
                        Visit {
                            age: 71.5,
                            values: vec![0.5, 0.0],
                            mask: vec![true, false],
                        },
                    ],
                },
            ],
            features: specs(),
        };
        assert_eq!(ds, expect);
    }

    #[test]
    fn load_errors_name_the_row() {
        let bad_age = "patient_id,age,MMSE,ADAS11\na,70,30,7\na,old,29,8\n";
        let e = parse_dataset(bad_age, &specs()).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
        let out_of_range = "patient_id,age,MMSE,ADAS11\na,70,31,7\n";
        let e = parse_dataset(out_of_range, &specs()).unwrap_err().to_string();
        assert!(e.contains("row 2") && e.contains("MMSE"), "{e}");
        let unknown = "patient_id,age,MMSE,ADAS11,FAQ\n";
        assert!(parse_dataset(unknown, &specs()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "patient_id,age,MMSE,ADAS11\na,70,28,7.5\na,71,,9\nb,69.25,21,\n";
        let ds = parse_dataset(text, &specs()).unwrap();
        let again = parse_dataset(&dataset_to_csv(&ds).unwrap(), &specs()).unwrap();
        for (p, q) in ds.patients.iter().zip(&again.patients) {
            for (v, w) in p.visits.iter().zip(&q.visits) {
                assert_eq!(v.mask, w.mask);
                for (a, b) in v.values.iter().zip(&w.values) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    fn series(id: &str, ages: &[f64]) -> PatientSeries {
        PatientSeries::new(
            id,
            ages.iter()
                .map(|&a| Visit::observed(a, vec![0.1, 0.2]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn short_follow_up_is_discarded() {
        let ds = Dataset::new(vec![series("p", &[70.0, 70.5, 71.5])], specs()).unwrap();
        let mut rng = rng::stream(0, &[]);
        let split = split_delta_t(&ds, 2.0, 0.25, 0, &mut rng).unwrap();
        assert!(split.pairs.is_empty());
        assert_eq!(split.discarded_ids, vec!["p".to_string()]);
    }

    #[test]
    fn annual_grid_enumeration() {
        let p = series("p", &[70.0, 71.0, 72.0, 73.0]);
        assert_eq!(admissible_pairs(&p, 2.0, 0.0, 0), vec![(0, 2), (1, 3)]);
        let ds = Dataset::new(vec![p], specs()).unwrap();
        let mut seen = HashSet::new();
        for seed in 0..50 {
            let mut rng = rng::stream(seed, &[]);
            let pair = split_delta_t(&ds, 2.0, 0.0, 0, &mut rng).unwrap().pairs.remove(0);
            assert_eq!(pair.input_visits.len(), pair.last_input_index + 1);
            assert!(pair.input_visits.iter().all(|v| v.age <= pair.last_input_age()));
            seen.insert((pair.last_input_index, pair.target_index));
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn unobserved_target_is_not_admissible() {
        let p = PatientSeries::new(
            "p",
            vec![
                Visit::observed(70.0, vec![0.1, 0.2]).unwrap(),
                Visit::new(72.0, vec![0.0, 0.3], vec![false, true]).unwrap(),
            ],
        )
        .unwrap();
        assert!(admissible_pairs(&p, 2.0, 0.0, 0).is_empty());
        assert_eq!(admissible_pairs(&p, 2.0, 0.0, 1), vec![(0, 1)]);
    }

    #[test]
    fn partition_rounding() {
        let mut patients = Vec::new();
        for i in 0..100 {
            patients.push(series(&format!("e{i:03}"), &[70.0, 71.0, 72.0]));
        }
        for i in 0..40 {
            patients.push(series(&format!("d{i:03}"), &[70.0]));
        }
        let ds = Dataset::new(patients, specs()).unwrap();
        let scheme = PartitionScheme {
            delta_t: 2.0,
            tolerance: 0.25,
            feature: 0,
            test_fraction: 0.5,
            validation_fraction: 0.1,
        };
        let part = partition(&ds, &scheme, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(part.estimation.len(), 80);
        assert_eq!(part.test.len(), 50);
        assert_eq!(part.validation.len(), 10);
        assert_eq!(part.estimation_eligible_ids.len(), 40);
        assert!(part.discarded_ids.iter().all(|id| id.starts_with('d')));
    }

    #[test]
    fn all_discarded_means_empty_test_error() {
        let ds = Dataset::new(vec![series("a", &[70.0]), series("b", &[71.0])], specs()).unwrap();
        let scheme = PartitionScheme {
            delta_t: 2.0,
            tolerance: 0.25,
            feature: 0,
            test_fraction: 0.5,
            validation_fraction: 0.1,
        };
        assert!(partition(&ds, &scheme, &mut rng::stream(1, &[])).is_err());
    }

    #[test]
    fn guard_detects_real_ids() {
        let sim = Dataset::new(
            vec![series("sim-00000", &[70.0]), series("sim-00001", &[70.0])],
            specs(),
        )
        .unwrap();
        assert!(strict_simulated_training_guard(&sim, &["a".into()]));
        let leaked = sim.merge(&Dataset::new(vec![series("a", &[70.0])], specs()).unwrap()).unwrap();
        assert!(!strict_simulated_training_guard(&leaked, &["a".into()]));
        assert!(!strict_simulated_training_guard(&sim, &["sim-00001".into()]));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
