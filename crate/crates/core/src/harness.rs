//! Splitting, balancing, cross-validated grid search and experiment runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use topic_learn::forest::ForestParams;
use topic_learn::metrics::{f1_per_class, macro_f1, mean_std};
use topic_learn::nn::{CellKind, MlpParams, RnnParams, Schedule};
use topic_learn::svm::{Gamma, SvmParams};
use topic_learn::tree::TreeParams;
use topic_learn::{train, Family, Hyperparameters, Input, ModelSpec, TrainedModel, TrainingData};

use crate::baselines::{
    fit_threshold_heuristic, greedy_select, heuristic_baseline_score, spb_classify, stratified_folds,
    SelectionConfig, SelectionTrace, SpbConfig, ThresholdHeuristic,
};
use crate::dataset::DecisionLabel;
use crate::error::{Error, Result};
use crate::featurize::{
    Dataset, Example, ExampleMeta, FeatureFamily, FeatureManifest, FeatureSequence, FeatureVector, FitItem, Normalizer,
    ParticipantStats, Provenance,
};

/// Which sessions take part, by group size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionSubset {
    #[serde(rename = "2p")]
    Two,
    #[serde(rename = "3p")]
    Three,
    #[default]
    All,
}

impl SessionSubset {
    pub fn admits(self, group_size: usize) -> bool {
        match self {
            SessionSubset::Two => group_size == 2,
            SessionSubset::Three => group_size == 3,
            SessionSubset::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Multiclass,
    #[default]
    TwoStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Acoustic,
    Kinect,
    Top20,
    #[default]
    All,
}

impl std::str::FromStr for FeatureSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "acoustic" => Ok(FeatureSet::Acoustic),
            "kinect" => Ok(FeatureSet::Kinect),
            "top20" => Ok(FeatureSet::Top20),
            "all" => Ok(FeatureSet::All),
            _ => Err(format!("unknown feature set '{s}'")),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "multiclass" => Ok(TaskKind::Multiclass),
            "two-step" => Ok(TaskKind::TwoStep),
            _ => Err(format!("unknown task '{s}'")),
        }
    }
}

/// Evaluated classification problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Multiclass,
    #[serde(rename = "binary_NA_vs_AN")]
    BinaryNaVsAn,
    #[serde(rename = "binary_A_vs_N")]
    BinaryAVsN,
    /// Both binary steps chained into a three-class decision.
    Composed,
}

impl EvalTask {
    pub fn n_classes(self) -> usize {
        match self {
            EvalTask::Multiclass | EvalTask::Composed => 3,
            _ => 2,
        }
    }

    /// Class of a label in this task; `None` when the label takes no part.
    pub fn class_of(self, label: DecisionLabel) -> Option<usize> {
        match (self, label) {
            (EvalTask::Multiclass | EvalTask::Composed, l) => Some(l.index()),
            (EvalTask::BinaryNaVsAn, DecisionLabel::NotAppropriate) => Some(0),
            (EvalTask::BinaryNaVsAn, _) => Some(1),
            (EvalTask::BinaryAVsN, DecisionLabel::NotAppropriate) => None,
            (EvalTask::BinaryAVsN, DecisionLabel::Appropriate) => Some(0),
            (EvalTask::BinaryAVsN, DecisionLabel::Needed) => Some(1),
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            EvalTask::Multiclass | EvalTask::Composed => &["not_appropriate", "appropriate", "needed"],
            EvalTask::BinaryNaVsAn => &["not_appropriate", "appropriate_or_needed"],
            EvalTask::BinaryAVsN => &["appropriate", "needed"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Multiclass => "multiclass",
            EvalTask::BinaryNaVsAn => "binary_NA_vs_AN",
            EvalTask::BinaryAVsN => "binary_A_vs_N",
            EvalTask::Composed => "composed",
        }
    }
}

/// Three-class decision from the two binary steps.
pub fn compose(step1: usize, step2: usize) -> usize {
    if step1 == 0 {
        0
    } else {
        1 + step2
    }
}

/// Derives an independent seed for one branch of the experiment.
pub fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub holdout_session_id: String,
    pub holdout_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn evaluation_ids(&self) -> BTreeSet<String> {
        self.holdout_ids.iter().chain(&self.test_ids).cloned().collect()
    }
}

fn by_class<'a>(meta: &[&'a ExampleMeta]) -> [Vec<&'a ExampleMeta>; 3] {
    let mut out: [Vec<&ExampleMeta>; 3] = Default::default();
    for m in meta {
        out[m.label.index()].push(m);
    }
    out
}

/// Holdout session balanced to its minority class, a per-class test sample of
/// `round(0.2 * minority)` from the remaining sessions and the rest as training.
pub fn make_split(meta: &[ExampleMeta], seed: u64) -> Result<SplitPlan> {
    let sessions: BTreeSet<&str> = meta.iter().map(|m| m.session_id.as_str()).collect();
    if sessions.len() < 2 {
        return Err(Error::InvalidConfig(format!("a split needs at least 2 sessions, got {}", sessions.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let complete: Vec<&str> = sessions
        .iter()
        .copied()
        .filter(|s| {
            let labels: BTreeSet<usize> = meta.iter().filter(|m| m.session_id == *s).map(|m| m.label.index()).collect();
            labels.len() == 3
        })
        .collect();
    let pool: Vec<&str> = if complete.is_empty() {
        log::warn!("no session contains every class; the holdout is drawn from all sessions");
        sessions.iter().copied().collect()
    } else {
        complete
    };
    let holdout = pool[rng.gen_range(0..pool.len())].to_string();

    let in_holdout: Vec<&ExampleMeta> = meta.iter().filter(|m| m.session_id == holdout).collect();
    let hold_classes = by_class(&in_holdout);
    let hold_min = hold_classes.iter().map(Vec::len).min().unwrap_or(0);
    let mut holdout_ids = Vec::new();
    for mut class in hold_classes {
        class.shuffle(&mut rng);
        holdout_ids.extend(class[..hold_min].iter().map(|m| m.key()));
    }

    let rest: Vec<&ExampleMeta> = meta.iter().filter(|m| m.session_id != holdout).collect();
    let rest_classes = by_class(&rest);
    for (k, c) in rest_classes.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::MissingClass {
                context: format!("sessions outside holdout {holdout}"),
                class: DecisionLabel::ALL[k].name().to_string(),
            });
        }
    }
    let minority = rest_classes.iter().map(Vec::len).min().unwrap_or(0);
    let per_class = (0.2 * minority as f64).round() as usize;
    let mut test = BTreeSet::new();
    for mut class in rest_classes {
        class.shuffle(&mut rng);
        test.extend(class[..per_class].iter().map(|m| m.key()));
    }
    let test_ids: Vec<String> = rest.iter().map(|m| m.key()).filter(|k| test.contains(k)).collect();
    let train_ids = rest.iter().map(|m| m.key()).filter(|k| !test.contains(k)).collect();
    Ok(SplitPlan {
        holdout_session_id: holdout,
        holdout_ids,
        test_ids,
        train_ids,
        seed,
    })
}

/// Linear-interpolated percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceOutcome {
    /// Positions into the input, duplicates included, shuffled.
    pub indices: Vec<usize>,
    pub target: usize,
    pub counts_before: Vec<usize>,
    /// Positions drawn as extra copies.
    pub duplicated: Vec<usize>,
    /// Interquartile band of the top feature per class.
    pub bands: Vec<(f64, f64)>,
    /// Classes oversampled from all their samples because the band was unusable.
    pub fallback_classes: Vec<usize>,
}

/// Equalises class counts at the median class size: larger classes are
/// undersampled, smaller ones grow by copies of samples whose top-feature
/// value lies within the class interquartile band.
pub fn balance_train(labels: &[usize], top_values: &[f64], n_classes: usize, rng: &mut ChaCha8Rng) -> Result<BalanceOutcome> {
    if labels.len() != top_values.len() {
        return Err(Error::Table(format!("{} labels but {} values", labels.len(), top_values.len())));
    }
    let classes: Vec<Vec<usize>> = (0..n_classes).map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();
    if let Some(k) = classes.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass {
            context: "balancing".into(),
            class: k.to_string(),
        });
    }
    let counts: Vec<usize> = classes.iter().map(Vec::len).collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let target = if n_classes % 2 == 1 {
        sorted[n_classes / 2]
    } else {
        ((sorted[n_classes / 2 - 1] + sorted[n_classes / 2]) as f64 / 2.0).round() as usize
    };
    let mut indices = Vec::with_capacity(target * n_classes);
    let mut duplicated = Vec::new();
    let mut bands = Vec::with_capacity(n_classes);
    let mut fallback_classes = Vec::new();
    for (c, members) in classes.iter().enumerate() {
        let vals: Vec<f64> = members.iter().map(|&i| top_values[i]).collect();
        let band = (percentile(&vals, 25.0), percentile(&vals, 75.0));
        bands.push(band);
        if members.len() >= target {
            let mut m = members.clone();
            m.shuffle(rng);
            indices.extend_from_slice(&m[..target]);
            continue;
        }
        indices.extend_from_slice(members);
        let mut pool: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| top_values[i] >= band.0 && top_values[i] <= band.1)
            .collect();
        if members.len() < 4 || pool.is_empty() {
            log::warn!("class {c} has {} samples; oversampling from the whole class", members.len());
            fallback_classes.push(c);
            pool = members.clone();
        }
        for _ in members.len()..target {
            let pick = pool[rng.gen_range(0..pool.len())];
            duplicated.push(pick);
            indices.push(pick);
        }
    }
    indices.shuffle(rng);
    Ok(BalanceOutcome {
        indices,
        target,
        counts_before: counts,
        duplicated,
        bands,
        fallback_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtGrid {
    pub max_depth: Vec<usize>,
    pub min_samples_split: Vec<usize>,
}

impl Default for DtGrid {
    fn default() -> Self {
        Self {
            max_depth: vec![3, 5, 10, 20],
            min_samples_split: vec![2, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfGrid {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
}

impl Default for RfGrid {
    fn default() -> Self {
        Self {
            n_estimators: vec![50, 100, 200],
            max_depth: vec![5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmGrid {
    pub c: Vec<f64>,
    pub gamma: Vec<Gamma>,
}

impl Default for SvmGrid {
    fn default() -> Self {
        Self {
            c: vec![0.1, 1.0, 10.0, 100.0],
            gamma: vec![Gamma::Scale, Gamma::Value(0.01), Gamma::Value(0.1), Gamma::Value(1.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpGrid {
    pub hidden_layers: Vec<Vec<usize>>,
    pub batch_size: Vec<usize>,
}

impl Default for MlpGrid {
    fn default() -> Self {
        Self {
            hidden_layers: vec![vec![32], vec![64], vec![128], vec![32, 32], vec![64, 32]],
            batch_size: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnGrid {
    pub hidden: Vec<usize>,
    pub batch_size: Vec<usize>,
}

impl Default for RnnGrid {
    fn default() -> Self {
        Self {
            hidden: vec![8, 16, 32],
            batch_size: vec![8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Grids {
    pub dt: DtGrid,
    pub rf: RfGrid,
    pub svm: SvmGrid,
    pub mlp: MlpGrid,
    pub rnn: RnnGrid,
    /// Optimiser settings for the neural families.
    pub schedule: Schedule,
}

impl Grids {
    /// Every cell of a family's grid, in a fixed order.
    pub fn cells(&self, family: Family, seed: u64) -> Vec<ModelSpec> {
        let spec = |hyperparameters| ModelSpec {
            family,
            hyperparameters,
            seed,
        };
        let mut out = Vec::new();
        match family {
            Family::Dt => {
                for &max_depth in &self.dt.max_depth {
                    for &min_samples_split in &self.dt.min_samples_split {
                        out.push(spec(Hyperparameters::Tree(TreeParams {
                            max_depth,
                            min_samples_split,
                        })));
                    }
                }
            }
            Family::Rf => {
                for &n_estimators in &self.rf.n_estimators {
                    for &max_depth in &self.rf.max_depth {
                        out.push(spec(Hyperparameters::Forest(ForestParams {
                            n_estimators,
                            max_depth,
                            ..Default::default()
                        })));
                    }
                }
            }
            Family::Svm => {
                for &c in &self.svm.c {
                    for &gamma in &self.svm.gamma {
                        out.push(spec(Hyperparameters::Svm(SvmParams {
                            c,
                            gamma,
                            ..Default::default()
                        })));
                    }
                }
            }
            Family::Mlp => {
                for h in &self.mlp.hidden_layers {
                    for &batch_size in &self.mlp.batch_size {
                        out.push(spec(Hyperparameters::Mlp(MlpParams {
                            hidden_layers: h.clone(),
                            batch_size,
                            schedule: self.schedule,
                        })));
                    }
                }
            }
            Family::Lstm | Family::Gru => {
                let cell = if family == Family::Lstm { CellKind::Lstm } else { CellKind::Gru };
                for &hidden in &self.rnn.hidden {
                    for &batch_size in &self.rnn.batch_size {
                        let mut p = RnnParams::new(cell, hidden, batch_size);
                        p.schedule = self.schedule;
                        out.push(spec(Hyperparameters::Rnn(p)));
                    }
                }
            }
        }
        out
    }
}

/// Inputs of one classification problem, already restricted to the chosen
/// feature dimensions.
#[derive(Debug, Clone, Default)]
pub struct TaskData {
    pub vectors: Vec<Vec<f64>>,
    pub sequences: Option<Vec<Vec<Vec<f64>>>>,
    pub labels: Vec<usize>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> TaskData {
        TaskData {
            vectors: idx.iter().map(|&i| self.vectors[i].clone()).collect(),
            sequences: self.sequences.as_ref().map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn training_data<'a>(&'a self, family: Family, validation: Option<&'a TaskData>) -> Result<TrainingData<'a>> {
        if family.is_sequential() {
            let seqs = |d: &'a TaskData| {
                d.sequences
                    .as_deref()
                    .ok_or_else(|| Error::InvalidConfig(format!("{family} needs sequences")))
            };
            let validation = match validation {
                Some(v) => Some((seqs(v)?, &v.labels[..])),
                None => None,
            };
            Ok(TrainingData::Sequences {
                x: seqs(self)?,
                y: &self.labels,
                validation,
            })
        } else {
            Ok(TrainingData::Vectors {
                x: &self.vectors,
                y: &self.labels,
                validation: validation.map(|v| (&v.vectors[..], &v.labels[..])),
            })
        }
    }

    fn input(&self, family: Family, i: usize) -> Input<'_> {
        match (&self.sequences, family.is_sequential()) {
            (Some(s), true) => Input::Sequence(&s[i]),
            _ => Input::Vector(&self.vectors[i]),
        }
    }
}

/// Class predictions of a model on every row.
pub fn predict_all(model: &TrainedModel, data: &TaskData, manifest_hash: &str) -> Result<Vec<usize>> {
    let family = model.spec().family;
    (0..data.len())
        .map(|i| Ok(model.predict(data.input(family, i), manifest_hash)?.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: ModelSpec,
    /// Mean validation macro-F1 per cell, in grid order.
    pub cell_scores: Vec<f64>,
    pub fold_scores: Vec<f64>,
    pub models: Vec<TrainedModel>,
}

impl GridResult {
    /// Fold model with the highest validation score.
    pub fn best_fold(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.fold_scores.iter().enumerate() {
            if s > self.fold_scores[best] {
                best = i;
            }
        }
        best
    }
}

/// K-fold stratified cross-validation over grid cells; the held-out fold
/// doubles as the early-stopping set of the neural families.
pub fn grid_search_cv(
    cells: &[ModelSpec],
    data: &TaskData,
    n_classes: usize,
    folds: usize,
    manifest_hash: &str,
    seed: u64,
) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(Error::InvalidConfig("empty hyperparameter grid".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    let classes: Vec<String> = (0..n_classes).map(|c| c.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fold = stratified_folds(&data.labels, n_classes, folds, &mut rng);
    let mut parts = Vec::with_capacity(folds);
    for f in 0..folds {
        let train_idx: Vec<usize> = (0..data.len()).filter(|&i| fold[i] != f).collect();
        let val_idx: Vec<usize> = (0..data.len()).filter(|&i| fold[i] == f).collect();
        for c in 0..n_classes {
            for (name, idx) in [("training", &train_idx), ("validation", &val_idx)] {
                if !idx.iter().any(|&i| data.labels[i] == c) {
                    return Err(Error::MissingClass {
                        context: format!("fold {f} {name} part"),
                        class: c.to_string(),
                    });
                }
            }
        }
        parts.push((data.subset(&train_idx), data.subset(&val_idx)));
    }
    let mut best: Option<(f64, usize, Vec<f64>, Vec<TrainedModel>)> = None;
    let mut cell_scores = Vec::with_capacity(cells.len());
    for (ci, cell) in cells.iter().enumerate() {
        let mut models = Vec::with_capacity(folds);
        let mut scores = Vec::with_capacity(folds);
        for (f, (tr, va)) in parts.iter().enumerate() {
            let mut spec = cell.clone();
            spec.seed = sub_seed(cell.seed, &[f as u64]);
            let validation = cell.family.is_sequential() || matches!(cell.family, Family::Mlp);
            let td = tr.training_data(cell.family, validation.then_some(va))?;
            let model = train(&spec, td, &classes, manifest_hash)?;
            let pred = predict_all(&model, va, manifest_hash)?;
            scores.push(macro_f1(&va.labels, &pred, n_classes));
            models.push(model);
        }
        let mean = scores.iter().sum::<f64>() / folds as f64;
        log::debug!("{} cell {ci}: {mean:.4}", cell.family);
        cell_scores.push(mean);
        if best.as_ref().is_none_or(|(b, ..)| mean > *b) {
            best = Some((mean, ci, scores, models));
        }
    }
    let (_, ci, fold_scores, models) = best.expect("grid is not empty");
    Ok(GridResult {
        best: cells[ci].clone(),
        cell_scores,
        fold_scores,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_model: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_std: Vec<f64>,
    pub macro_f1: f64,
    pub macro_f1_std: f64,
}

/// Mean and population std across several prediction sets on one evaluation set.
pub fn score_predictions(truth: &[usize], predictions: &[Vec<usize>], n_classes: usize) -> Result<Scores> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let per_class: Vec<Vec<f64>> = predictions.iter().map(|p| f1_per_class(truth, p, n_classes)).collect();
    let per_model: Vec<f64> = predictions.iter().map(|p| macro_f1(truth, p, n_classes)).collect();
    let (macro_mean, macro_std) = mean_std(&per_model);
    let (per_class_f1, per_class_std) = (0..n_classes)
        .map(|k| mean_std(&per_class.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .unzip();
    Ok(Scores {
        per_model,
        per_class_f1,
        per_class_std,
        macro_f1: macro_mean,
        macro_f1_std: macro_std,
    })
}

pub fn evaluate(models: &[TrainedModel], data: &TaskData, n_classes: usize, manifest_hash: &str) -> Result<Scores> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = models.iter().map(|m| predict_all(m, data, manifest_hash)).collect::<Result<Vec<_>>>()?;
    score_predictions(&data.labels, &preds, n_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    /// Model family name, `heuristic` or `spb`.
    pub method: String,
    /// `test` or `holdout`.
    pub eval_set: String,
    pub n_eval: usize,
    pub classes: Vec<String>,
    pub scores: Scores,
    pub spec: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sessions: SessionSubset,
    pub task: TaskKind,
    pub feature_set: FeatureSet,
    pub families: Vec<Family>,
    pub seed: u64,
    /// Also run the threshold heuristics and the speech-and-pause rule.
    pub baselines: bool,
    pub folds: usize,
    pub top_k: usize,
    pub selection: SelectionConfig,
    pub spb: SpbConfig,
    pub grids: Grids,
    /// Family packaged into the deployable pipeline; the first family if unset.
    pub deploy: Option<Family>,
    /// Keep the energy entries measured after the utterance end.
    pub post_energy: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sessions: SessionSubset::All,
            task: TaskKind::TwoStep,
            feature_set: FeatureSet::All,
            families: Family::ALL.to_vec(),
            seed: 0,
            baselines: true,
            folds: 5,
            top_k: 20,
            selection: SelectionConfig::default(),
            spb: SpbConfig::default(),
            grids: Grids::default(),
            deploy: None,
            post_energy: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self, have_sequences: bool) -> Result<()> {
        if self.families.is_empty() && !self.baselines {
            return Err(Error::InvalidConfig("nothing to run: no families and baselines disabled".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.feature_set == FeatureSet::Top20 && self.top_k == 0 {
            return Err(Error::InvalidConfig("top20 feature set with top_k = 0".into()));
        }
        if let Some(f) = self.families.iter().find(|f| f.is_sequential()) {
            if !have_sequences {
                return Err(Error::InvalidConfig(format!("{f} needs feature sequences but only aggregated vectors were given")));
            }
        }
        if let Some(d) = self.deploy {
            if !self.families.contains(&d) {
                return Err(Error::InvalidConfig(format!("deploy family {d} is not among the trained families")));
            }
        }
        Ok(())
    }

    fn stages(&self) -> Vec<EvalTask> {
        match self.task {
            TaskKind::Multiclass => vec![EvalTask::Multiclass],
            TaskKind::TwoStep => vec![EvalTask::BinaryNaVsAn, EvalTask::BinaryAVsN],
        }
    }

    fn selection_depth(&self) -> usize {
        let mut k = 1;
        if self.baselines {
            k = k.max(3);
        }
        if self.feature_set == FeatureSet::Top20 {
            k = k.max(self.top_k);
        }
        k
    }
}

/// Normalisation, feature restriction and stage models needed to classify a
/// fresh utterance.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub manifest_hash: String,
    pub task: TaskKind,
    pub family: Family,
    pub vector_normalizer: Normalizer,
    pub sequence_normalizer: Option<Normalizer>,
    pub feature_indices: Vec<usize>,
    pub sequence_indices: Vec<usize>,
    /// One model per stage.
    pub models: Vec<TrainedModel>,
}

#[derive(Serialize, Deserialize)]
struct PipelineHeader {
    manifest_hash: String,
    task: TaskKind,
    family: Family,
    vector_normalizer: Normalizer,
    sequence_normalizer: Option<Normalizer>,
    feature_indices: Vec<usize>,
    sequence_indices: Vec<usize>,
    stages: usize,
}

impl Pipeline {
    /// Writes `pipeline.json` and one `stage_<k>.ttm` model file per stage.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = PipelineHeader {
            manifest_hash: self.manifest_hash.clone(),
            task: self.task,
            family: self.family,
            vector_normalizer: self.vector_normalizer.clone(),
            sequence_normalizer: self.sequence_normalizer.clone(),
            feature_indices: self.feature_indices.clone(),
            sequence_indices: self.sequence_indices.clone(),
            stages: self.models.len(),
        };
        let p = dir.join("pipeline.json");
        let text = serde_json::to_string_pretty(&header).map_err(|source| Error::Json { path: p.clone(), source })?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        for (k, m) in self.models.iter().enumerate() {
            let mp = dir.join(format!("stage_{k}.ttm"));
            std::fs::write(&mp, m.to_bytes()?).map_err(|e| Error::io(&mp, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("pipeline.json");
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let h: PipelineHeader = serde_json::from_str(&text).map_err(|source| Error::Json { path: p.clone(), source })?;
        let models = (0..h.stages)
            .map(|k| {
                let mp = dir.join(format!("stage_{k}.ttm"));
                let bytes = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
                Ok(TrainedModel::from_bytes(&bytes)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest_hash: h.manifest_hash,
            task: h.task,
            family: h.family,
            vector_normalizer: h.vector_normalizer,
            sequence_normalizer: h.sequence_normalizer,
            feature_indices: h.feature_indices,
            sequence_indices: h.sequence_indices,
            models,
        })
    }

    pub fn needs_sequences(&self) -> bool {
        self.family.is_sequential()
    }

    /// Registers own-data statistics for every participant of `examples`
    /// the normalisers were not fitted on. Returns how many were added.
    pub fn adapt_unseen(&mut self, examples: &[Example]) -> Result<usize> {
        let mut stats: BTreeMap<String, (ParticipantStats, Option<ParticipantStats>)> = BTreeMap::new();
        for e in examples {
            let key = e.meta.participant_key();
            if self.vector_normalizer.knows(&key) {
                continue;
            }
            let entry = stats.entry(key).or_insert_with(|| {
                (
                    ParticipantStats::new(self.vector_normalizer.dim()),
                    self.sequence_normalizer.as_ref().map(|n| ParticipantStats::new(n.dim())),
                )
            });
            entry.0.push_row(&e.vector.values, &e.vector.defined);
            if let (Some(st), Some(s)) = (entry.1.as_mut(), &e.sequence) {
                st.push_sample(s.steps.iter().zip(&s.defined).map(|(r, d)| (&r[..], &d[..])));
            }
        }
        let added = stats.len();
        for (key, (v, s)) in stats {
            self.vector_normalizer.set_unseen(&key, v)?;
            if let (Some(s), Some(norm)) = (s, self.sequence_normalizer.as_mut()) {
                norm.set_unseen(&key, s)?;
            }
        }
        Ok(added)
    }

    /// Three-class label and probabilities for raw features of the
    /// participant `key`.
    pub fn predict(&self, key: &str, vector: &FeatureVector, sequence: Option<&FeatureSequence>) -> Result<(DecisionLabel, [f64; 3])> {
        let mut v = vector.clone();
        v.normalized = false;
        self.vector_normalizer.apply_vector(key, &mut v)?;
        let row: Vec<f64> = self.feature_indices.iter().map(|&i| v.values[i]).collect();
        let seq_rows = match (self.needs_sequences(), sequence, &self.sequence_normalizer) {
            (true, Some(s), Some(norm)) => {
                let mut s = s.clone();
                s.normalized = false;
                norm.apply_sequence(key, &mut s)?;
                Some(restrict_sequence(&s.steps, &self.sequence_indices))
            }
            (true, _, _) => return Err(Error::InvalidConfig(format!("{} needs a feature sequence", self.family))),
            _ => None,
        };
        let input = match &seq_rows {
            Some(s) => Input::Sequence(s),
            None => Input::Vector(&row),
        };
        let probs: Vec<Vec<f64>> = self
            .models
            .iter()
            .map(|m| Ok(m.predict(input, &self.manifest_hash)?.1))
            .collect::<Result<_>>()?;
        let p = match self.task {
            TaskKind::Multiclass => [probs[0][0], probs[0][1], probs[0][2]],
            TaskKind::TwoStep => [probs[0][0], probs[0][1] * probs[1][0], probs[0][1] * probs[1][1]],
        };
        let label = match self.task {
            TaskKind::Multiclass => topic_learn::argmax(&probs[0]),
            TaskKind::TwoStep => compose(topic_learn::argmax(&probs[0]), topic_learn::argmax(&probs[1])),
        };
        Ok((DecisionLabel::ALL[label], p))
    }
}

fn restrict_sequence(steps: &[Vec<f64>], dims: &[usize]) -> Vec<Vec<f64>> {
    steps.iter().map(|r| dims.iter().map(|&j| r[j]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub task: EvalTask,
    pub selection: SelectionTrace,
    /// Manifest names of the selected features.
    pub selected_names: Vec<String>,
    pub balance: BalanceOutcome,
    pub heuristics: Vec<ThresholdHeuristic>,
    /// Best grid cell per family.
    pub best_specs: Vec<ModelSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub split: SplitPlan,
    pub feature_indices: Vec<usize>,
    pub sequence_indices: Vec<usize>,
    pub stages: Vec<StageSummary>,
    pub reports: Vec<EvalReport>,
    pub provenance: Vec<Provenance>,
    #[serde(skip)]
    pub pipeline: Option<Pipeline>,
}

impl ExperimentResult {
    pub fn report(&self, task: EvalTask, method: &str, eval_set: &str) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.task == task && r.method == method && r.eval_set == eval_set)
    }
}

/// Normalised examples of one partition.
struct Partition {
    metas: Vec<ExampleMeta>,
    vectors: Vec<Vec<f64>>,
    sequences: Option<Vec<Vec<Vec<f64>>>>,
}

impl Partition {
    fn task_data(&self, task: EvalTask, dims: &[usize], seq_dims: &[usize]) -> (TaskData, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, m) in self.metas.iter().enumerate() {
            if let Some(c) = task.class_of(m.label) {
                rows.push(i);
                labels.push(c);
            }
        }
        let data = TaskData {
            vectors: rows.iter().map(|&i| dims.iter().map(|&d| self.vectors[i][d]).collect()).collect(),
            sequences: self
                .sequences
                .as_ref()
                .map(|s| rows.iter().map(|&i| restrict_sequence(&s[i], seq_dims)).collect()),
            labels,
        };
        (data, rows)
    }
}

fn partition(ds: &Dataset, ids: &[String], vn: &Normalizer, sn: Option<&Normalizer>) -> Result<Partition> {
    let index: BTreeMap<String, usize> = ds.examples.iter().enumerate().map(|(i, e)| (e.meta.key(), i)).collect();
    let mut metas = Vec::with_capacity(ids.len());
    let mut vectors = Vec::with_capacity(ids.len());
    let mut sequences = sn.map(|_| Vec::with_capacity(ids.len()));
    for id in ids {
        let ex = &ds.examples[index[id]];
        let key = ex.meta.participant_key();
        let (v, _) = vn.transform_row(&key, &ex.vector.values, &ex.vector.defined);
        vectors.push(v);
        if let (Some(out), Some(norm)) = (sequences.as_mut(), sn) {
            let s = ex.sequence.as_ref().expect("checked before partitioning");
            out.push(s.steps.iter().zip(&s.defined).map(|(r, d)| norm.transform_row(&key, r, d).0).collect());
        }
        metas.push(ex.meta.clone());
    }
    Ok(Partition {
        metas,
        vectors,
        sequences,
    })
}

fn feature_indices(set: FeatureSet, trace: &SelectionTrace, top_k: usize, post_energy: bool) -> Vec<usize> {
    let m = FeatureManifest::vector();
    let dropped = if post_energy { Vec::new() } else { m.post_energy_indices() };
    let keep = |i: &usize| !dropped.contains(i);
    match set {
        FeatureSet::Acoustic => m.family_indices(FeatureFamily::Acoustic).into_iter().filter(keep).collect(),
        FeatureSet::Kinect => m.family_indices(FeatureFamily::Kinect).into_iter().filter(keep).collect(),
        FeatureSet::Top20 => trace.chosen.iter().copied().filter(keep).take(top_k).collect(),
        FeatureSet::All => (0..m.len()).filter(keep).collect(),
    }
}

/// Split, normalise, select, balance, tune and evaluate every configured
/// method on the test sessions and the holdout session.
pub fn run_experiment(ds: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let examples: Vec<_> = ds.examples.iter().filter(|e| cfg.sessions.admits(e.meta.group_size)).collect();
    if examples.is_empty() {
        return Err(Error::Empty("examples in the selected sessions"));
    }
    let wants_seq = cfg.families.iter().any(|f| f.is_sequential());
    let have_seq = examples.iter().all(|e| e.sequence.is_some());
    cfg.validate(have_seq)?;
    let metas: Vec<ExampleMeta> = examples.iter().map(|e| e.meta.clone()).collect();
    let split = make_split(&metas, sub_seed(cfg.seed, &[1]))?;
    let forbidden = split.evaluation_ids();
    let by_id: BTreeMap<String, _> = examples.iter().map(|e| (e.meta.key(), *e)).collect();
    let train_examples: Vec<_> = split.train_ids.iter().map(|id| by_id[id]).collect();

    let keys: Vec<(String, String)> = train_examples.iter().map(|e| (e.meta.participant_key(), e.meta.key())).collect();
    let items: Vec<FitItem<'_>> = train_examples
        .iter()
        .zip(&keys)
        .map(|(e, (p, id))| FitItem {
            key: p,
            id,
            rows: vec![(&e.vector.values[..], &e.vector.defined[..])],
        })
        .collect();
    let vn = Normalizer::fit(&items, FeatureManifest::vector().len())?;
    let sn = if wants_seq {
        let items: Vec<FitItem<'_>> = train_examples
            .iter()
            .zip(&keys)
            .map(|(e, (p, id))| {
                let s = e.sequence.as_ref().expect("validated");
                FitItem {
                    key: p,
                    id,
                    rows: s.steps.iter().zip(&s.defined).map(|(v, d)| (&v[..], &d[..])).collect(),
                }
            })
            .collect();
        Some(Normalizer::fit(&items, FeatureManifest::sequence().len())?)
    } else {
        None
    };
    let mut provenance: Vec<Provenance> = vn.provenance().to_vec();
    if let Some(n) = &sn {
        provenance.extend(n.provenance().iter().map(|p| Provenance {
            stat: format!("sequence_{}", p.stat),
            ids: p.ids.clone(),
        }));
    }
    let filtered = Dataset {
        manifest_hash: ds.manifest_hash.clone(),
        examples: examples.iter().map(|e| (*e).clone()).collect(),
    };
    let train = partition(&filtered, &split.train_ids, &vn, sn.as_ref())?;
    let test = partition(&filtered, &split.test_ids, &vn, sn.as_ref())?;
    let holdout = partition(&filtered, &split.holdout_ids, &vn, sn.as_ref())?;

    let manifest = FeatureManifest::vector();
    let all_dims: Vec<usize> = (0..manifest.len()).collect();
    let all_seq: Vec<usize> = (0..FeatureManifest::sequence().len()).collect();
    let hash = ds.manifest_hash.as_str();
    let mut reports = Vec::new();
    let mut stages = Vec::new();
    let mut stage_models: Vec<BTreeMap<&'static str, GridResult>> = Vec::new();
    let mut dims_used = all_dims.clone();
    let mut seq_used = Vec::new();
    let stage_tasks = cfg.stages();

    for (si, &task) in stage_tasks.iter().enumerate() {
        let nc = task.n_classes();
        let (full, rows) = train.task_data(task, &all_dims, &all_seq);
        let stage_ids: Vec<String> = rows.iter().map(|&i| train.metas[i].key()).collect();
        let sel_cfg = SelectionConfig {
            seed: sub_seed(cfg.seed, &[2, si as u64]),
            ..cfg.selection
        };
        let trace = greedy_select(&full.vectors, &full.labels, nc, cfg.selection_depth(), &sel_cfg)?;
        provenance.push(Provenance::new(format!("selection:{}", task.name()), stage_ids.clone()));
        let top: Vec<f64> = full.vectors.iter().map(|r| r[trace.chosen[0]]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[3, si as u64]));
        let balance = balance_train(&full.labels, &top, nc, &mut rng)?;
        provenance.push(Provenance::new(format!("balance:{}", task.name()), stage_ids.clone()));

        let dims = feature_indices(cfg.feature_set, &trace, cfg.top_k, cfg.post_energy);
        let seq_dims = manifest.sequence_dims_for(&dims);
        if wants_seq && seq_dims.is_empty() {
            return Err(Error::InvalidConfig("selected features have no sequence counterpart".into()));
        }
        dims_used = dims.clone();
        seq_used = seq_dims.clone();
        let balanced_full = full.subset(&balance.indices);
        let restrict = |d: &TaskData| TaskData {
            vectors: d.vectors.iter().map(|r| dims.iter().map(|&j| r[j]).collect()).collect(),
            sequences: d.sequences.as_ref().map(|s| s.iter().map(|q| restrict_sequence(q, &seq_dims)).collect()),
            labels: d.labels.clone(),
        };
        let balanced = restrict(&balanced_full);
        let (test_full, _) = test.task_data(task, &all_dims, &all_seq);
        let (hold_full, _) = holdout.task_data(task, &all_dims, &all_seq);
        let evals = [("test", restrict(&test_full)), ("holdout", restrict(&hold_full))];

        let mut grid_results = BTreeMap::new();
        let mut best_specs = Vec::new();
        for (fi, &family) in cfg.families.iter().enumerate() {
            let cells = cfg.grids.cells(family, sub_seed(cfg.seed, &[4, si as u64, fi as u64]));
            let gr = grid_search_cv(&cells, &balanced, nc, cfg.folds, hash, sub_seed(cfg.seed, &[5, si as u64]))?;
            log::info!("{} {}: best cell {:.4}", task.name(), family, gr.cell_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            for (name, data) in &evals {
                if data.is_empty() {
                    continue;
                }
                reports.push(EvalReport {
                    task,
                    method: family.name().to_string(),
                    eval_set: name.to_string(),
                    n_eval: data.len(),
                    classes: task.class_names(),
                    scores: evaluate(&gr.models, data, nc, hash)?,
                    spec: Some(gr.best.clone()),
                });
            }
            best_specs.push(gr.best.clone());
            grid_results.insert(family.name(), gr);
        }

        let mut heuristics = Vec::new();
        if cfg.baselines {
            for &f in trace.chosen.iter().take(3) {
                let col: Vec<f64> = balanced_full.vectors.iter().map(|r| r[f]).collect();
                match fit_threshold_heuristic(&col, &balanced_full.labels, nc, f) {
                    Ok(h) => heuristics.push(h),
                    Err(Error::TooFewDistinct(n)) => log::warn!("feature {f} has {n} distinct values; heuristic skipped"),
                    Err(e) => return Err(e),
                }
            }
            provenance.push(Provenance::new(format!("heuristic:{}", task.name()), stage_ids));
            let full_evals = [("test", &test_full), ("holdout", &hold_full)];
            for (name, data) in full_evals {
                if data.is_empty() || heuristics.is_empty() {
                    continue;
                }
                let s = heuristic_baseline_score(&heuristics, &data.vectors, &data.labels)?;
                let preds: Vec<Vec<usize>> = heuristics.iter().map(|h| data.vectors.iter().map(|r| h.predict(r)).collect()).collect();
                let mut scores = score_predictions(&data.labels, &preds, nc)?;
                scores.macro_f1 = s.mean;
                scores.macro_f1_std = s.std;
                reports.push(EvalReport {
                    task,
                    method: "heuristic".into(),
                    eval_set: name.into(),
                    n_eval: data.len(),
                    classes: task.class_names(),
                    scores,
                    spec: None,
                });
            }
        }
        stages.push(StageSummary {
            task,
            selected_names: trace.chosen.iter().map(|&i| manifest.entries[i].name.clone()).collect(),
            selection: trace,
            balance,
            heuristics,
            best_specs,
        });
        stage_models.push(grid_results);
    }

    if cfg.baselines {
        for (name, part) in [("test", &test), ("holdout", &holdout)] {
            if part.metas.is_empty() {
                continue;
            }
            let task = EvalTask::BinaryNaVsAn;
            let truth: Vec<usize> = part.metas.iter().map(|m| task.class_of(m.label).expect("binary covers all")).collect();
            let pred: Vec<usize> = part
                .metas
                .iter()
                .map(|m| spb_classify(m.cumulative_speech, m.trailing_silence, &cfg.spb).index())
                .collect();
            reports.push(EvalReport {
                task,
                method: "spb".into(),
                eval_set: name.into(),
                n_eval: truth.len(),
                classes: task.class_names(),
                scores: score_predictions(&truth, &[pred], 2)?,
                spec: None,
            });
        }
    }

    if cfg.task == TaskKind::TwoStep {
        for &family in &cfg.families {
            let (g1, g2) = (&stage_models[0][family.name()], &stage_models[1][family.name()]);
            for (name, part) in [("test", &test), ("holdout", &holdout)] {
                let (data, _) = part.task_data(EvalTask::Composed, &dims_used, &seq_used);
                if data.is_empty() {
                    continue;
                }
                let preds = g1
                    .models
                    .iter()
                    .zip(&g2.models)
                    .map(|(m1, m2)| {
                        let a = predict_all(m1, &data, hash)?;
                        let b = predict_all(m2, &data, hash)?;
                        Ok(a.iter().zip(&b).map(|(&x, &y)| compose(x, y)).collect())
                    })
                    .collect::<Result<Vec<Vec<usize>>>>()?;
                reports.push(EvalReport {
                    task: EvalTask::Composed,
                    method: family.name().into(),
                    eval_set: name.into(),
                    n_eval: data.len(),
                    classes: EvalTask::Composed.class_names(),
                    scores: score_predictions(&data.labels, &preds, 3)?,
                    spec: None,
                });
            }
        }
    }

    for p in &provenance {
        p.check(&forbidden)?;
    }

    let pipeline = cfg.deploy.or_else(|| cfg.families.first().copied()).map(|family| {
        let models = stage_models
            .iter()
            .map(|g| {
                let gr = &g[family.name()];
                gr.models[gr.best_fold()].clone()
            })
            .collect();
        Pipeline {
            manifest_hash: ds.manifest_hash.clone(),
            task: cfg.task,
            family,
            vector_normalizer: vn.clone(),
            sequence_normalizer: sn.clone(),
            feature_indices: dims_used.clone(),
            sequence_indices: seq_used.clone(),
            models,
        }
    });
    if cfg.feature_set == FeatureSet::Top20 && stage_tasks.len() > 1 {
        log::info!("pipeline uses the feature selection of the last stage");
    }

    Ok(ExperimentResult {
        config: cfg.clone(),
        split,
        feature_indices: dims_used,
        sequence_indices: seq_used,
        stages,
        reports,
        provenance,
        pipeline,
    })
}

/// Plain-text table of every report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:<10} {:<8} {:>5}  {:<32} macro-F1", "task", "method", "set", "n", "per-class F1");
    for r in reports {
        let per: Vec<String> = r.scores.per_class_f1.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:<8} {:>5}  {:<32} {:.2} ± {:.2}",
            r.task.name(),
            r.method,
            r.eval_set,
            r.n_eval,
            per.join(" / "),
            r.scores.macro_f1,
            r.scores.macro_f1_std
        );
    }
    out
}
