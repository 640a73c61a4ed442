use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mae, noise_floor, BaselineSummary};
use crate::calibration::{calibrate, SaemConfig};
use crate::cohort::{
    partition, split_delta_t, strict_simulated_training_guard, PartitionScheme, PredictionPair,
};
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::personalize::{batch_personalize, PersonalizeConfig};
use crate::predictor::{predict, train, TrainConfig};
use crate::rng::{derive_seed, stream};
use crate::simulation::{simulate_cohort, FirstVisitAge, SimulationConfig, VisitCount};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Train on real estimation-set pairs.
    Standard,
    /// Train on a virtual cohort simulated from the estimation set.
    Augmented,
}

/// Test/retest measurement noise on the raw scale, turned into an MAE band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBand {
    pub raw_std_lo: f64,
    pub raw_std_hi: f64,
    /// Defaults to the target feature's `raw_max`.
    pub raw_max: Option<f64>,
}

/// Visit layout of the virtual cohort; first-visit ages come from the estimation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub visits_per_patient: VisitCount,
    pub visit_spacing: f64,
    pub add_noise: bool,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            visits_per_patient: VisitCount::Fixed(7),
            visit_spacing: 1.0,
            add_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub delta_t: f64,
    pub tolerance: f64,
    /// Features used by every stage; empty means all features of the dataset.
    pub features: Vec<String>,
    pub target_feature: String,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub n_simulated_patients: usize,
    pub n_runs: usize,
    pub seed: u64,
    /// Only simulated patients in the training set. Turning it off mixes in
    /// the real estimation pairs.
    pub strict_guard: bool,
    pub noise_band: Option<NoiseBand>,
    pub saem: SaemConfig,
    pub personalize: PersonalizeConfig,
    pub simulation: SimulationSettings,
    pub train: TrainConfig,
    pub data_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Standard,
            delta_t: 3.0,
            tolerance: 0.5,
            features: Vec::new(),
            target_feature: String::new(),
            test_fraction: 0.5,
            validation_fraction: 0.1,
            n_simulated_patients: 500,
            n_runs: 10,
            seed: 0,
            strict_guard: true,
            noise_band: None,
            saem: SaemConfig::default(),
            personalize: PersonalizeConfig::default(),
            simulation: SimulationSettings::default(),
            train: TrainConfig::default(),
            data_path: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::config("n_runs must be at least 1"));
        }
        if self.mode == Mode::Augmented && self.n_simulated_patients == 0 {
            return Err(Error::config("augmented mode needs n_simulated_patients ≥ 1"));
        }
        let names = self.feature_set(ds);
        for f in &names {
            if ds.feature_index(f).is_none() {
                return Err(Error::config(format!("unknown feature {f:?}")));
            }
        }
        if !names.contains(&self.target_feature) {
            return Err(Error::config(format!(
                "target feature {:?} is not in the feature set",
                self.target_feature
            )));
        }
        if let Some(b) = &self.noise_band {
            if !(b.raw_std_lo >= 0.0 && b.raw_std_hi >= b.raw_std_lo) {
                return Err(Error::config("noise band needs 0 ≤ lo ≤ hi"));
            }
        }
        self.scheme(0).validate()?;
        self.saem.validate()?;
        self.personalize.validate()?;
        self.train.validate()
    }

    fn feature_set(&self, ds: &Dataset) -> Vec<String> {
        if self.features.is_empty() {
            ds.feature_names()
        } else {
            self.features.clone()
        }
    }

    fn scheme(&self, feature: usize) -> PartitionScheme {
        PartitionScheme {
            delta_t: self.delta_t,
            tolerance: self.tolerance,
            feature,
            test_fraction: self.test_fraction,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed { stage: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub mae: Option<f64>,
    pub baseline: Option<BaselineSummary>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_estimation_patients: usize,
    pub n_simulated_patients: usize,
    /// Outcome of the simulated-only check; `None` outside augmented mode.
    pub guard: Option<bool>,
    pub best_epoch: Option<usize>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    fn new(run: usize, seed: u64) -> Self {
        RunRecord {
            run,
            seed,
            status: RunStatus::Ok,
            mae: None,
            baseline: None,
            n_train: 0,
            n_validation: 0,
            n_test: 0,
            n_estimation_patients: 0,
            n_simulated_patients: 0,
            guard: None,
            best_epoch: None,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub delta_t: f64,
    pub n_simulated_patients: usize,
    pub runs: Vec<RunRecord>,
    pub n_completed: usize,
    /// Some runs failed; the statistics cover the completed ones.
    pub partial: bool,
    pub mean_mae: Option<f64>,
    pub std_mae: Option<f64>,
    pub min_mae: Option<f64>,
    pub max_mae: Option<f64>,
    pub mean_baseline_mae: Option<f64>,
    pub noise_band: Option<(f64, f64)>,
    pub mean_train_size: f64,
    pub mean_test_size: f64,
    pub config: ExperimentConfig,
    /// Kept out of the JSON so reports stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, (String, String)> {
    r.map_err(|e| (name.to_string(), e.to_string()))
}

fn predict_all(
    params: &crate::predictor::LstmParams,
    pairs: &[PredictionPair],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let preds = pairs
        .iter()
        .map(|p| predict(params, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, pairs.iter().map(|p| p.target_value).collect()))
}

fn run_once(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    feature: usize,
    run: usize,
) -> RunRecord {
    let run_seed = derive_seed(cfg.seed, &[run as u64]);
    let mut rec = RunRecord::new(run, run_seed);
    if let Err((stage, message)) = run_stages(cfg, ds, feature, run_seed, &mut rec) {
        log::warn!("run {run} failed at {stage}: {message}");
        rec.status = RunStatus::Failed { stage, message };
        rec.mae = None;
    }
    rec
}

fn run_stages(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    feature: usize,
    run_seed: u64,
    rec: &mut RunRecord,
) -> std::result::Result<(), (String, String)> {
    let part = stage(
        "partition",
        partition(ds, &cfg.scheme(feature), &mut stream(run_seed, &[1])),
    )?;
    let mut split_rng = stream(run_seed, &[2]);
    let mut split = |d: &Dataset| split_delta_t(d, cfg.delta_t, cfg.tolerance, feature, &mut split_rng);
    let test = stage("split", split(&part.test))?.pairs;
    let validation = stage("split", split(&part.validation))?.pairs;
    let real_train = stage(
        "split",
        split(&ds.subset(&part.estimation_eligible_ids)),
    )?
    .pairs;
    rec.n_test = test.len();
    rec.n_validation = validation.len();
    rec.n_estimation_patients = part.estimation.len();
    if validation.is_empty() {
        return Err((
            "split".into(),
            "validation set has no prediction pairs".into(),
        ));
    }

    let train_pairs = match cfg.mode {
        Mode::Standard => real_train,
        Mode::Augmented => {
            let saem = SaemConfig {
                seed: derive_seed(run_seed, &[3]),
                ..cfg.saem.clone()
            };
            let cal = stage("calibration", calibrate(&part.estimation, &saem))?;
            let pcfg = PersonalizeConfig {
                seed: derive_seed(run_seed, &[4]),
                ..cfg.personalize.clone()
            };
            let fitted = stage(
                "personalization",
                batch_personalize(&part.estimation, &cal.theta, &pcfg),
            )?;
            rec.warnings
                .extend(fitted.values().filter_map(|p| p.warning.clone()));
            let effects: Vec<_> = fitted.into_values().map(|p| p.effects).collect();
            let sim_cfg = SimulationConfig {
                n_patients: cfg.n_simulated_patients,
                visits_per_patient: cfg.simulation.visits_per_patient.clone(),
                visit_spacing: cfg.simulation.visit_spacing,
                first_visit_age: FirstVisitAge::from_dataset(&part.estimation),
                add_noise: cfg.simulation.add_noise,
                seed: derive_seed(run_seed, &[5]),
            };
            let sim = stage(
                "simulation",
                simulate_cohort(&cal.theta, &effects, &ds.features, &sim_cfg),
            )?;
            rec.n_simulated_patients = sim.len();
            let guard = strict_simulated_training_guard(&sim, &part.estimation.ids());
            rec.guard = Some(guard);
            if !guard {
                return Err(("guard".into(), "real patient found in simulated training set".into()));
            }
            let mut pairs = stage("split", split(&sim))?.pairs;
            if !cfg.strict_guard {
                rec.guard = Some(false);
                pairs.extend(real_train);
            }
            pairs
        }
    };
    rec.n_train = train_pairs.len();
    let tcfg = TrainConfig {
        seed: derive_seed(run_seed, &[6]),
        ..cfg.train.clone()
    };
    let (params, history) = stage("training", train(&train_pairs, &validation, &tcfg))?;
    rec.best_epoch = Some(history.best_epoch);
    let (preds, targets) = stage("evaluation", predict_all(&params, &test))?;
    rec.mae = Some(stage("evaluation", mae(&preds, &targets))?);
    rec.baseline = Some(BaselineSummary::of(&test));
    Ok(())
}

fn summarize(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // summation rounding can push the mean a hair outside [min, max]
    (Some(mean.clamp(min, max)), Some(std), Some(min), Some(max))
}

/// Runs `cfg.n_runs` independent splits of `dataset` and aggregates their test MAE.
///
/// A failing run is recorded with its stage and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ExperimentReport> {
    let started = Instant::now();
    cfg.validate(dataset)?;
    let ds = dataset.select_features(&cfg.feature_set(dataset))?;
    let feature = ds
        .feature_index(&cfg.target_feature)
        .ok_or_else(|| Error::config("target feature missing"))?;

    let runs: Vec<RunRecord> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|run| run_once(cfg, &ds, feature, run))
        .collect();

    let maes: Vec<f64> = runs.iter().filter_map(|r| r.mae).collect();
    let baselines: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.baseline.as_ref().and_then(|b| b.mae))
        .collect();
    let (mean_mae, std_mae, min_mae, max_mae) = summarize(&maes);
    let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.status == RunStatus::Ok).collect();
    let mean_size = |f: fn(&RunRecord) -> usize| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| f(r) as f64).sum::<f64>() / ok.len() as f64
        }
    };
    let noise_band = cfg.noise_band.as_ref().map(|b| {
        let raw_max = b.raw_max.unwrap_or(ds.features[feature].raw_max);
        (noise_floor(b.raw_std_lo, raw_max), noise_floor(b.raw_std_hi, raw_max))
    });
    Ok(ExperimentReport {
        mode: cfg.mode,
        delta_t: cfg.delta_t,
        n_simulated_patients: match cfg.mode {
            Mode::Standard => 0,
            Mode::Augmented => cfg.n_simulated_patients,
        },
        n_completed: ok.len(),
        partial: ok.len() < runs.len(),
        mean_mae,
        std_mae,
        min_mae,
        max_mae,
        mean_baseline_mae: summarize(&baselines).0,
        noise_band,
        mean_train_size: mean_size(|r| r.n_train),
        mean_test_size: mean_size(|r| r.n_test),
        runs,
        config: cfg.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepBehavior {
    /// MAE never rises by more than the noise tolerance as the cohort grows.
    Monotone,
    /// All sizes sit within the noise tolerance of each other.
    Flat,
    NonMonotone,
    /// Fewer than two sizes produced a mean MAE.
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sizes: Vec<usize>,
    pub standard: ExperimentReport,
    pub augmented: Vec<ExperimentReport>,
    pub behavior: SweepBehavior,
    /// Twice the largest standard error of the mean among the sizes.
    pub tolerance: f64,
}

fn classify(reports: &[ExperimentReport]) -> (SweepBehavior, f64) {
    let points: Vec<(f64, f64)> = reports
        .iter()
        .filter_map(|r| {
            Some((r.mean_mae?, r.std_mae? / (r.n_completed.max(1) as f64).sqrt()))
        })
        .collect();
    if points.len() < 2 {
        return (SweepBehavior::Undetermined, 0.0);
    }
    let tol = 2.0 * points.iter().map(|p| p.1).fold(0.0, f64::max);
    let means: Vec<f64> = points.iter().map(|p| p.0).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let behavior = if hi - lo <= tol {
        SweepBehavior::Flat
    } else if means.windows(2).all(|w| w[1] <= w[0] + tol) {
        SweepBehavior::Monotone
    } else {
        SweepBehavior::NonMonotone
    };
    (behavior, tol)
}

/// Augmented runs for each virtual cohort size plus one standard reference.
pub fn run_sweep(cfg: &ExperimentConfig, dataset: &Dataset, sizes: &[usize]) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(Error::config("sweep needs at least one cohort size"));
    }
    let standard = run_experiment(
        &ExperimentConfig {
            mode: Mode::Standard,
            ..cfg.clone()
        },
        dataset,
    )?;
    let augmented = sizes
        .iter()
        .map(|&n| {
            run_experiment(
                &ExperimentConfig {
                    mode: Mode::Augmented,
                    n_simulated_patients: n,
                    ..cfg.clone()
                },
                dataset,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (behavior, tolerance) = classify(&augmented);
    Ok(SweepReport {
        sizes: sizes.to_vec(),
        standard,
        augmented,
        behavior,
        tolerance,
    })
}

/// Plot-ready rows, one per run and configuration.
pub fn tidy_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(
        "mode,delta_t,n_simulated,run,seed,status,mae,baseline_mae,n_train,n_test,guard\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for rep in reports {
        let mode = match rep.mode {
            Mode::Standard => "standard",
            Mode::Augmented => "augmented",
        };
        for r in &rep.runs {
            let status = match &r.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed { stage, .. } => format!("failed:{stage}"),
            };
            out.push_str(&format!(
                "{mode},{},{},{},{},{status},{},{},{},{},{}\n",
                rep.delta_t,
                rep.n_simulated_patients,
                r.run,
                r.seed,
                opt(r.mae),
                opt(r.baseline.as_ref().and_then(|b| b.mae)),
                r.n_train,
                r.n_test,
                r.guard.map(|g| g.to_string()).unwrap_or_default(),
            ));
        }
    }
    out
}
