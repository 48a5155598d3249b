//! Bagged Gini trees with per-split feature subsampling and majority vote.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LearnError, Result};
use crate::tree::{check_training_set, DecisionTree, FeatureSampling, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, n_features: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((n_features as f64).sqrt().round() as usize).max(1),
            MaxFeatures::All => n_features,
            MaxFeatures::Count(k) => k.clamp(1, n_features),
        }
    }
}

fn default_min_split() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_max_features() -> MaxFeatures {
    MaxFeatures::Sqrt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    #[serde(default = "default_min_split")]
    pub min_samples_split: usize,
    #[serde(default = "default_true")]
    pub bootstrap: bool,
    #[serde(default = "default_max_features")]
    pub max_features: MaxFeatures,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 10,
            min_samples_split: 2,
            bootstrap: true,
            max_features: MaxFeatures::Sqrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_classes: usize,
}

impl RandomForest {
    pub fn fit(
        x: &[Vec<f64>],
        y: &[usize],
        n_classes: usize,
        params: ForestParams,
        seed: u64,
    ) -> Result<Self> {
        if params.n_estimators < 1 {
            return Err(LearnError::InvalidHyperparameter(
                "n_estimators must be at least 1".into(),
            ));
        }
        let n_features = check_training_set(x, y, n_classes)?;
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_samples_split: params.min_samples_split,
        };
        let per_split = params.max_features.resolve(n_features);
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::with_capacity(params.n_estimators);
        for _ in 0..params.n_estimators {
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let indices: Vec<usize> = if params.bootstrap {
                (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            let sampling = if per_split >= n_features {
                FeatureSampling::All
            } else {
                FeatureSampling::Random {
                    count: per_split,
                    rng: &mut rng,
                }
            };
            trees.push(DecisionTree::fit_with(
                x,
                y,
                indices,
                n_classes,
                tree_params,
                sampling,
            )?);
        }
        Ok(Self { trees, n_classes })
    }

    /// Fraction of trees voting for each class.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut votes = vec![0.0; self.n_classes];
        for tree in &self.trees {
            votes[tree.predict(x)] += 1.0;
        }
        let n = self.trees.len() as f64;
        votes.iter_mut().for_each(|v| *v /= n);
        votes
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::argmax(&self.predict_proba(x))
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
}
