//! Evaluation: metrics, distribution-fidelity reports, the synthetic
//! ground-truth generator and the end-to-end experiment runner.

mod experiment;
mod metrics;
mod synth;

pub use experiment::{
    run_experiment, run_sweep, tidy_csv, ExperimentConfig, ExperimentReport, Mode, NoiseBand,
    RunRecord, RunStatus, SimulationSettings, SweepBehavior, SweepReport,
};
pub use metrics::{
    constant_baseline, distribution_report, ks_statistic, mae, noise_floor, BaselineSummary,
    DistributionReport, FeatureDistribution, N_BINS,
};
pub use synth::{feature_specs, synth_cohort, synth_cohort_with_effects, VisitPlan};
