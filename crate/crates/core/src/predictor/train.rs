use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::lstm::{encode_pair, forward, loss_and_gradients, LstmParams, Sample};
use crate::cohort::PredictionPair;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled (AdamW-style) weight decay coefficient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 1000,
            patience: 20,
            hidden_dim: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate must be > 0 and weight_decay ≥ 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.hidden_dim == 0 {
            return Err(Error::config("batch_size, max_epochs and hidden_dim must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: LstmParams,
    v: LstmParams,
    t: i32,
}

impl Adam {
    pub fn new(shape: &LstmParams, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = LstmParams::zeros(shape.input_dim, shape.hidden_dim);
        Adam {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut LstmParams, grad: &LstmParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (lr, wd, b1, b2, eps) = (
            self.learning_rate,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
        );
        let grads = grad.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                p[j] -= lr * (update + wd * p[j]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
        }
        out
    }
}

pub fn encode_pairs(pairs: &[PredictionPair], d: usize) -> Vec<Sample> {
    pairs
        .iter()
        .map(|p| (encode_pair(p, d), p.target_value))
        .collect()
}

fn mse(params: &LstmParams, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for (seq, y) in samples {
        let e = forward(params, seq)? - y;
        total += e * e;
    }
    Ok(total / samples.len() as f64)
}

/// Trains on prediction pairs; the feature dimension is taken from the first training pair.
pub fn train(
    pairs_train: &[PredictionPair],
    pairs_validation: &[PredictionPair],
    cfg: &TrainConfig,
) -> Result<(LstmParams, TrainHistory)> {
    let d = pairs_train
        .first()
        .ok_or_else(|| Error::config("training set is empty"))?
        .input_visits[0]
        .dim();
    train_samples(
        &encode_pairs(pairs_train, d),
        &encode_pairs(pairs_validation, d),
        cfg,
    )
}

/// Mini-batch AdamW with early stopping; returns the parameters of the best validation epoch.
pub fn train_samples(
    train: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<(LstmParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    let input_dim = train[0].0[0].len();
    let mut rng = rng::stream(cfg.seed, &[]);
    let mut params = LstmParams::random(input_dim, cfg.hidden_dim, &mut rng);
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);

    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sse = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (loss, grad) = loss_and_gradients(&params, &batch);
            if !loss.is_finite() {
                return Err(Error::numerical(
                    "training",
                    format!("non-finite loss at epoch {epoch}"),
                ));
            }
            train_sse += loss * chunk.len() as f64;
            adam.step(&mut params, &grad);
        }
        let val_mse = mse(&params, validation)?;
        if !val_mse.is_finite() || !params.is_finite() {
            return Err(Error::numerical(
                "training",
                format!("diverged at epoch {epoch}"),
            ));
        }
        epochs.push(EpochRecord {
            epoch,
            train_mse: train_sse / train.len() as f64,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_val_mse, best_params, best_epoch) = best;
    Ok((
        best_params,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_mse,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng::stream(seed, &[]);
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..4);
                let seq: Vec<Vec<f64>> = (0..len)
                    .map(|_| vec![rng.random_range(0.1..0.9), 1.0, rng.random_range(0.1..0.4)])
                    .collect();
                let y = seq[len - 1][0];
                (seq, y)
            })
            .collect()
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let cfg = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        let (_, h) = train_samples(&toy_samples(20, 1), &toy_samples(5, 2), &cfg).unwrap();
        assert_eq!(h.epochs.len(), 1);
    }

    #[test]
    fn training_is_seeded() {
        let cfg = TrainConfig {
            max_epochs: 15,
            ..Default::default()
        };
        let a = train_samples(&toy_samples(40, 1), &toy_samples(10, 2), &cfg).unwrap();
        let b = train_samples(&toy_samples(40, 1), &toy_samples(10, 2), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn returned_params_are_the_best_epoch() {
        let cfg = TrainConfig {
            max_epochs: 60,
            patience: 5,
            learning_rate: 3e-2,
            ..Default::default()
        };
        let val = toy_samples(10, 2);
        let (params, h) = train_samples(&toy_samples(40, 1), &val, &cfg).unwrap();
        let min = h.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val_mse, min);
        assert_eq!(mse(&params, &val).unwrap(), min);
    }

    #[test]
    fn decay_alone_shrinks_the_norm() {
        let mut p = LstmParams::random(3, 4, &mut rng::stream(2, &[]));
        let zero = LstmParams::zeros(3, 4);
        let mut adam = Adam::new(&p, 1e-2, 1e-1);
        let mut last = p.norm();
        for _ in 0..10 {
            adam.step(&mut p, &zero);
            let n = p.norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn history_csv_shape() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_mse: 0.5,
                val_mse: 0.25,
            }],
            best_epoch: 1,
            best_val_mse: 0.25,
        };
        assert_eq!(h.to_csv(), "epoch,train_mse,val_mse\n1,0.5,0.25\n");
    }
}
