//! Sequence regressor: a single-layer LSTM with a linear head, trained with
//! AdamW and validation-based early stopping.

mod lstm;
mod train;

pub use lstm::{
    encode_pair, forward, loss_and_gradients, predict, Checkpoint, LstmParams, Sample,
    CHECKPOINT_VERSION,
};
pub use train::{encode_pairs, train, train_samples, Adam, EpochRecord, TrainConfig, TrainHistory};
