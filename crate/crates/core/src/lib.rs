//! Longitudinal disease-progression modelling with virtual cohort augmentation.
//!
//! The crate covers the whole chain used to train a sequence predictor on
//! simulated patients instead of (or next to) a small real cohort:
//!
//! * [`model`]: parallel-logistic mixed-effects trajectories and the
//!   individual complete log-likelihood with its analytic gradient.
//! * [`calibration`]: MCMC-SAEM estimation of the fixed effects.
//! * [`personalize`]: per-patient MAP random effects via a box-constrained
//!   limited-memory quasi-Newton solver ([`optim`]).
//! * [`simulation`]: KDE + conditional-Gaussian sampling of new individuals
//!   and virtual cohort synthesis.
//! * [`cohort`]: CSV ingestion, normalization, ΔT prediction pairs and the
//!   estimation/test/validation partition.
//! * [`predictor`]: a small LSTM regressor trained with AdamW and early
//!   stopping.
//! * [`eval`]: metrics, distribution reports, the synthetic ground-truth
//!   generator and the experiment runner.

pub mod calibration;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod personalize;
pub mod predictor;
pub mod rng;
pub mod simulation;

pub use calibration::{calibrate, CalibrationResult, SaemConfig};
pub use cohort::{PredictionPair, SplitResult};
pub use error::{Error, Result};
pub use model::{
    Dataset, Direction, FeatureSpec, FixedEffects, NoiseModel, PatientSeries, RandomEffects,
    Visit,
};
pub use personalize::{personalize, PersonalizeConfig};
pub use predictor::{LstmParams, TrainConfig};
pub use simulation::{simulate_cohort, SimulationConfig};
