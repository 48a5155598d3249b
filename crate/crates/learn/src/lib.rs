//! Classifiers used by the topic-turn pipeline: Gini decision trees, random
//! forests, RBF support vector machines (SMO), multilayer perceptrons and
//! single-layer LSTM/GRU sequence models, plus F1 metrics and a checksummed
//! model container.

pub mod error;
pub mod forest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod svm;
pub mod tree;

pub use error::{LearnError, Result};
pub use model::{train, Family, Hyperparameters, Input, ModelSpec, TrainedModel, TrainingData};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    nn::softmax_in_place(&mut out);
    out
}
