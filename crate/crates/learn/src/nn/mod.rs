//! Small dense and recurrent softmax classifiers trained with Adam.
//!
//! Parameters of each network live in a single flat `Vec<f64>` so that the
//! optimiser, early stopping snapshots and finite-difference gradient checks
//! all operate on plain slices.

mod mlp;
mod rnn;

pub use mlp::{Mlp, MlpParams};
pub use rnn::{CellKind, Rnn, RnnParams};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LearnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            max_epochs: 200,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch (dropout active).
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    cfg: Schedule,
}

impl Adam {
    pub fn new(n_params: usize, cfg: Schedule) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            cfg,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let Schedule {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in out {
        *w = rng.gen_range(-limit..limit);
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(1e-300).ln()
}

/// What the shared training loop needs from a network.
pub(crate) trait Trainable {
    type Sample;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Adds the gradient of the summed loss to `grad` and returns the summed loss.
    fn accumulate(
        &self,
        sample: &Self::Sample,
        label: usize,
        grad: &mut [f64],
        rng: Option<&mut ChaCha8Rng>,
    ) -> f64;
    fn sample_loss(&self, sample: &Self::Sample, label: usize) -> f64;
}

pub(crate) fn mean_loss<N: Trainable>(net: &N, x: &[N::Sample], y: &[usize]) -> f64 {
    x.iter().zip(y).map(|(s, &l)| net.sample_loss(s, l)).sum::<f64>() / x.len() as f64
}

pub(crate) fn fit_loop<N: Trainable>(
    net: &mut N,
    x: &[N::Sample],
    y: &[usize],
    validation: Option<(&[N::Sample], &[usize])>,
    batch_size: usize,
    schedule: &Schedule,
    seed: u64,
    stochastic: bool,
) -> Result<TrainHistory> {
    if batch_size == 0 {
        return Err(LearnError::InvalidHyperparameter("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ba7c);
    let mut adam = Adam::new(net.params().len(), *schedule);
    let mut grad = vec![0.0; net.params().len()];
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_params = net.params().to_vec();
    let mut stale = 0usize;

    for epoch in 0..schedule.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                let r = if stochastic { Some(&mut rng) } else { None };
                loss += net.accumulate(&x[i], y[i], &mut grad, r);
            }
            if !loss.is_finite() {
                return Err(LearnError::NonFiniteLoss {
                    seed,
                    epoch,
                    batch: b,
                    batch_size,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.update(net.params_mut(), &grad);
            epoch_loss += loss;
        }
        history.train_loss.push(epoch_loss / x.len() as f64);

        if let Some((vx, vy)) = validation {
            let val = mean_loss(net, vx, vy);
            if !val.is_finite() {
                return Err(LearnError::NonFiniteLoss {
                    seed,
                    epoch,
                    batch: usize::MAX,
                    batch_size,
                });
            }
            history.val_loss.push(val);
            if val < best_val - schedule.min_delta {
                best_val = val;
                best_params.copy_from_slice(net.params());
                history.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= schedule.patience {
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    if validation.is_some() {
        net.params_mut().copy_from_slice(&best_params);
    }
    Ok(history)
}
