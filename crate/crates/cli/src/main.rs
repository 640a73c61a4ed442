use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vcohort::calibration::{calibrate, CalibrationResult, SaemConfig};
use vcohort::cohort::{dataset_to_csv, load_dataset, split_delta_t, write_atomic, SplitManifest};
use vcohort::error::ErrorKind;
use vcohort::eval::{
    distribution_report, feature_specs, mae, run_experiment, run_sweep, synth_cohort_with_effects,
    tidy_csv, BaselineSummary, ExperimentConfig, VisitPlan,
};
use vcohort::personalize::{batch_personalize, Personalized, PersonalizeConfig};
use vcohort::predictor::{predict, train, Checkpoint, TrainConfig};
use vcohort::rng::stream;
use vcohort::simulation::{simulate_cohort, FirstVisitAge, SimulationConfig, VisitCount};
use vcohort::{Dataset, Direction, Error, FeatureSpec, FixedEffects, RandomEffects, Result};

#[derive(Parser)]
#[command(name = "vcohort", version, about = "Virtual cohort augmentation for progression prediction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON list of feature specs. Without it every non-id, non-age column is
    /// taken as already normalized to [0, 1].
    #[arg(long, global = true)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    /// Horizon in years.
    #[arg(long)]
    delta_t: f64,
    #[arg(long, default_value_t = 0.5)]
    tolerance: f64,
    /// Target feature name.
    #[arg(long)]
    feature: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth synthetic cohort.
    Synth {
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Estimate the fixed effects with MCMC-SAEM.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
    },
    /// MAP random effects for every patient of a cohort.
    Personalize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Sample a virtual cohort.
    Simulate {
        #[arg(long)]
        calibration: PathBuf,
        /// Personalized effects to sample from; defaults to the last SAEM chain state.
        #[arg(long)]
        personalized: Option<PathBuf>,
        /// Cohort whose baseline ages seed the first visits.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Build ΔT prediction pairs and write the split manifest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        pairs: PairArgs,
    },
    /// Train the sequence predictor.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[command(flatten)]
        pairs: PairArgs,
    },
    /// Test-set MAE of a trained model, or a real-vs-simulated distribution report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        simulated: Option<PathBuf>,
        #[arg(long)]
        delta_t: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        tolerance: f64,
        #[arg(long)]
        feature: Option<String>,
    },
    /// Repeated standard or augmented runs, optionally swept over cohort sizes.
    Experiment {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated virtual cohort sizes.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthConfig {
    theta: FixedEffects,
    n_patients: usize,
    plan: VisitPlan,
    missing_rate: f64,
    seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            theta: FixedEffects {
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
            },
            n_patients: 200,
            plan: VisitPlan::annual(6, 73.0, 3.0),
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SimulateConfig {
    n_patients: usize,
    visits_per_patient: VisitCount,
    visit_spacing: f64,
    /// Used when no reference cohort is given.
    first_visit_age: f64,
    add_noise: bool,
    seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_patients: 500,
            visits_per_patient: VisitCount::Fixed(7),
            visit_spacing: 1.0,
            first_visit_age: 70.0,
            add_noise: true,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct PredictionReport {
    delta_t: f64,
    feature: String,
    n_pairs: usize,
    mae: f64,
    baseline: BaselineSummary,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn feature_specs_for(common: &Common, data: &Path) -> Result<Vec<FeatureSpec>> {
    if let Some(p) = &common.features {
        return read_json(p);
    }
    let text = fs::read_to_string(data).map_err(|source| Error::Io {
        path: data.to_path_buf(),
        source,
    })?;
    let header = text.lines().next().unwrap_or("");
    header
        .split(',')
        .map(str::trim)
        .filter(|h| *h != "patient_id" && *h != "age")
        .map(|h| FeatureSpec::new(h, 1.0, Direction::Increasing))
        .collect()
}

fn load(common: &Common, data: &Path) -> Result<Dataset> {
    load_dataset(data, &feature_specs_for(common, data)?)
}

fn target_index(ds: &Dataset, name: &str) -> Result<usize> {
    ds.feature_index(name)
        .ok_or_else(|| Error::Config(format!("unknown feature {name:?}")))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = &common.out_dir;
    let cfg_path = common.config.as_deref();

    match &cli.command {
        Command::Synth { n_patients } => {
            let mut cfg: SynthConfig = read_config(cfg_path)?;
            if let Some(n) = n_patients {
                cfg.n_patients = *n;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let (ds, effects) = synth_cohort_with_effects(
                &cfg.theta,
                cfg.n_patients,
                &cfg.plan,
                cfg.missing_rate,
                &mut stream(cfg.seed, &[]),
            )?;
            let effects: BTreeMap<&str, &RandomEffects> =
                ds.patients.iter().map(|p| p.id.as_str()).zip(&effects).collect();
            write_text(&out.join("cohort.csv"), &dataset_to_csv(&ds)?)?;
            write_json(&out.join("features.json"), &feature_specs(ds.dim()))?;
            write_json(&out.join("theta.json"), &cfg.theta)?;
            write_json(&out.join("effects.json"), &effects)?;
            println!("{} patients, {} visits -> {}", ds.len(), ds.n_visits(), out.display());
        }
        Command::Calibrate { data } => {
            let mut cfg: SaemConfig = read_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let ds = load(common, data)?;
            let result = calibrate(&ds, &cfg)?;
            write_text(&out.join("calibration.json"), &result.to_json()?)?;
            println!("sigma = {:.4}", result.theta.sigma);
        }
        Command::Personalize { data, calibration } => {
            let mut cfg: PersonalizeConfig = read_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let ds = load(common, data)?;
            let cal = CalibrationResult::from_json(&read_text(calibration)?)?;
            check_features(&ds, &cal)?;
            let fitted = batch_personalize(&ds, &cal.theta, &cfg)?;
            let n_warn = fitted.values().filter(|p| p.warning.is_some()).count();
            write_json(&out.join("personalized.json"), &fitted)?;
            println!("{} patients personalized, {n_warn} warnings", fitted.len());
        }
        Command::Simulate {
            calibration,
            personalized,
            reference,
            n_patients,
        } => {
            let mut cfg: SimulateConfig = read_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(n) = n_patients {
                cfg.n_patients = *n;
            }
            let cal = CalibrationResult::from_json(&read_text(calibration)?)?;
            let effects: Vec<RandomEffects> = match personalized {
                Some(p) => read_json::<BTreeMap<String, Personalized>>(p)?
                    .into_values()
                    .map(|p| p.effects)
                    .collect(),
                None => cal.random_effects(),
            };
            let features = match &common.features {
                Some(p) => read_json(p)?,
                None => cal
                    .feature_names
                    .iter()
                    .map(|n| FeatureSpec::new(n.as_str(), 1.0, Direction::Increasing))
                    .collect::<Result<Vec<_>>>()?,
            };
            let first_visit_age = match reference {
                Some(r) => FirstVisitAge::from_dataset(&load(common, r)?),
                None => FirstVisitAge::Fixed(cfg.first_visit_age),
            };
            let sim = simulate_cohort(
                &cal.theta,
                &effects,
                &features,
                &SimulationConfig {
                    n_patients: cfg.n_patients,
                    visits_per_patient: cfg.visits_per_patient,
                    visit_spacing: cfg.visit_spacing,
                    first_visit_age,
                    add_noise: cfg.add_noise,
                    seed: cfg.seed,
                },
            )?;
            write_text(&out.join("simulated.csv"), &dataset_to_csv(&sim)?)?;
            println!("{} virtual patients -> {}", sim.len(), out.display());
        }
        Command::Split { data, pairs } => {
            let ds = load(common, data)?;
            let k = target_index(&ds, &pairs.feature)?;
            let split = split_delta_t(
                &ds,
                pairs.delta_t,
                pairs.tolerance,
                k,
                &mut stream(common.seed.unwrap_or(0), &[]),
            )?;
            let manifest = SplitManifest::new(&split, pairs.delta_t, pairs.tolerance, &pairs.feature);
            write_json(&out.join("split_manifest.json"), &manifest)?;
            println!(
                "{} pairs, {} patients discarded",
                split.pairs.len(),
                split.discarded_ids.len()
            );
        }
        Command::Train {
            data,
            validation,
            pairs,
        } => {
            let mut cfg: TrainConfig = read_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let train_ds = load(common, data)?;
            let val_ds = load(common, validation)?;
            let k = target_index(&train_ds, &pairs.feature)?;
            let mut rng = stream(cfg.seed, &[1]);
            let tr = split_delta_t(&train_ds, pairs.delta_t, pairs.tolerance, k, &mut rng)?;
            let va = split_delta_t(&val_ds, pairs.delta_t, pairs.tolerance, k, &mut rng)?;
            let (params, history) = train(&tr.pairs, &va.pairs, &cfg)?;
            write_json(&out.join("model.json"), &Checkpoint::new(&params))?;
            write_text(&out.join("history.csv"), &history.to_csv())?;
            println!(
                "best epoch {} of {}, validation MSE {:.5}",
                history.best_epoch,
                history.epochs.len(),
                history.best_val_mse
            );
        }
        Command::Evaluate {
            data,
            model,
            simulated,
            delta_t,
            tolerance,
            feature,
        } => {
            let ds = load(common, data)?;
            if model.is_none() && simulated.is_none() {
                return Err(Error::Config("evaluate needs --model or --simulated".into()));
            }
            if let Some(m) = model {
                let (Some(dt), Some(name)) = (delta_t, feature) else {
                    return Err(Error::Config("--model needs --delta-t and --feature".into()));
                };
                let params = read_json::<Checkpoint>(m)?.into_params()?;
                let k = target_index(&ds, name)?;
                let split = split_delta_t(&ds, *dt, *tolerance, k, &mut stream(common.seed.unwrap_or(0), &[]))?;
                let preds = split
                    .pairs
                    .iter()
                    .map(|p| predict(&params, p))
                    .collect::<Result<Vec<_>>>()?;
                let targets: Vec<f64> = split.pairs.iter().map(|p| p.target_value).collect();
                let report = PredictionReport {
                    delta_t: *dt,
                    feature: name.clone(),
                    n_pairs: preds.len(),
                    mae: mae(&preds, &targets)?,
                    baseline: BaselineSummary::of(&split.pairs),
                };
                write_json(&out.join("evaluation.json"), &report)?;
                println!("MAE {:.4} over {} pairs", report.mae, report.n_pairs);
            }
            if let Some(s) = simulated {
                let sim = load(common, s)?;
                let rep = distribution_report(&ds, &sim)?;
                write_json(&out.join("distribution.json"), &rep)?;
                write_text(&out.join("distribution.csv"), &rep.to_csv())?;
                println!("max KS {:.4}", rep.max_ks().unwrap_or(f64::NAN));
            }
        }
        Command::Experiment { data, sweep } => {
            let mut cfg: ExperimentConfig = read_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let path = data
                .clone()
                .or_else(|| cfg.data_path.clone())
                .ok_or_else(|| Error::Config("experiment needs --data or data_path".into()))?;
            let ds = load(common, &path)?;
            match sweep {
                None => {
                    let report = run_experiment(&cfg, &ds)?;
                    write_json(&out.join("report.json"), &report)?;
                    write_text(&out.join("runs.csv"), &tidy_csv(std::slice::from_ref(&report)))?;
                    write_json(
                        &out.join("timing.json"),
                        &serde_json::json!({ "wall_clock_seconds": report.wall_clock_seconds }),
                    )?;
                    println!(
                        "{}/{} runs, mean MAE {}",
                        report.n_completed,
                        report.runs.len(),
                        report.mean_mae.map_or("n/a".into(), |m| format!("{m:.4}"))
                    );
                }
                Some(sizes) => {
                    let report = run_sweep(&cfg, &ds, sizes)?;
                    let mut all = vec![report.standard.clone()];
                    all.extend(report.augmented.iter().cloned());
                    write_json(&out.join("sweep.json"), &report)?;
                    write_text(&out.join("runs.csv"), &tidy_csv(&all))?;
                    let timing: BTreeMap<String, f64> = all
                        .iter()
                        .map(|r| (format!("{:?}-{}", r.mode, r.n_simulated_patients), r.wall_clock_seconds))
                        .collect();
                    write_json(&out.join("timing.json"), &timing)?;
                    println!("sweep behavior: {:?}", report.behavior);
                }
            }
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_features(ds: &Dataset, cal: &CalibrationResult) -> Result<()> {
    if ds.feature_names() != cal.feature_names {
        return Err(Error::Data {
            location: "feature set".into(),
            message: format!(
                "cohort has {:?}, calibration has {:?}",
                ds.feature_names(),
                cal.feature_names
            ),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
