use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, fit_loop, glorot, softmax_in_place, Schedule, TrainHistory, Trainable};
use crate::error::{LearnError, Result};
use crate::tree::check_training_set;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden_layers: Vec<usize>,
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden_layers: vec![32],
            batch_size: 16,
            schedule: Schedule::default(),
        }
    }
}

/// ReLU hidden layers and a softmax output, trained on categorical
/// cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths from input to output.
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_classes);
        let n_params = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = vec![0.0; n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            glorot(&mut rng, fan_in, fan_out, &mut params[offset..offset + fan_in * fan_out]);
            offset += fan_in * fan_out + fan_out;
        }
        Self { sizes, params }
    }

    pub fn fit(
        x: &[Vec<f64>],
        y: &[usize],
        n_classes: usize,
        validation: Option<(&[Vec<f64>], &[usize])>,
        params: &MlpParams,
        seed: u64,
    ) -> Result<(Self, TrainHistory)> {
        let dim = check_training_set(x, y, n_classes)?;
        if params.hidden_layers.iter().any(|&h| h == 0) {
            return Err(LearnError::InvalidHyperparameter("hidden layer of width 0".into()));
        }
        if let Some((vx, vy)) = validation {
            if !vx.is_empty() {
                check_training_set(vx, vy, n_classes)?;
            }
        }
        let validation = validation.filter(|(vx, _)| !vx.is_empty());
        let mut net = Self::new(dim, &params.hidden_layers, n_classes, seed);
        let history = fit_loop(
            &mut net,
            x,
            y,
            validation,
            params.batch_size,
            &params.schedule,
            seed,
            false,
        )?;
        Ok((net, history))
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Layer activations; the last entry holds softmax probabilities.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        let n_layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let mut out: Vec<f64> = weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + b)
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                softmax_in_place(&mut out);
            }
            acts.push(out);
            offset += fan_in * fan_out + fan_out;
        }
        acts
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).pop().expect("network has an output layer")
    }

    /// Mean cross-entropy over `(x, y)`.
    pub fn loss(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        super::mean_loss(self, x, y)
    }

    /// Mean cross-entropy and its gradient with respect to [`Mlp::params`].
    pub fn loss_and_gradient(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (s, &l) in x.iter().zip(y) {
            loss += self.accumulate(s, l, &mut grad, None);
        }
        let n = x.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl Trainable for Mlp {
    type Sample = Vec<f64>;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate(&self, x: &Vec<f64>, label: usize, grad: &mut [f64], _: Option<&mut ChaCha8Rng>) -> f64 {
        let acts = self.forward(x);
        let probs = acts.last().unwrap();
        let loss = cross_entropy(probs, label);
        let mut delta: Vec<f64> = probs.clone();
        delta[label] -= 1.0;

        let mut offsets = Vec::with_capacity(self.sizes.len() - 1);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        for l in (0..self.sizes.len() - 1).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (o, d) in delta.iter().enumerate() {
                    gb[o] += d;
                    for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                for (p, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        loss
    }

    fn sample_loss(&self, x: &Vec<f64>, label: usize) -> f64 {
        cross_entropy(&self.predict_proba(x), label)
    }
}
