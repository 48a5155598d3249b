//! Single-feature threshold heuristics, the speech-and-pause rule and forward
//! greedy feature selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use topic_learn::metrics::{f1_from_counts, macro_f1, mean_std};
use topic_learn::svm::{KernelSvm, SvmParams};

use crate::error::{Error, Result};

/// Thresholds split a feature into `n_classes` regions; `region_map[r]` is
/// the class predicted in region `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHeuristic {
    pub feature_index: usize,
    /// Ascending; region `r` holds values above `r` thresholds.
    pub thresholds: Vec<f64>,
    pub region_map: Vec<usize>,
    /// Macro-F1 on the fitting data.
    pub train_score: f64,
}

impl ThresholdHeuristic {
    pub fn n_classes(&self) -> usize {
        self.region_map.len()
    }

    pub fn predict_value(&self, v: f64) -> usize {
        let region = self.thresholds.iter().filter(|&&t| v > t).count();
        self.region_map[region]
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        self.predict_value(row[self.feature_index])
    }
}

/// All orderings of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for k in 0..n {
            if !prefix.contains(&k) {
                prefix.push(k);
                go(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(n), n, &mut out);
    out
}

/// Macro-F1 from per-region class counts `counts[region][class]` under a map.
fn region_score(counts: &[[usize; 3]], map: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..n_classes {
        let mut tp = 0;
        let mut predicted = 0;
        let mut actual = 0;
        for (r, row) in counts.iter().enumerate() {
            actual += row[k];
            if map[r] == k {
                predicted += row.iter().sum::<usize>();
                tp += row[k];
            }
        }
        total += f1_from_counts(tp, predicted, actual);
    }
    total / n_classes as f64
}

/// Exhaustive fit over midpoints of consecutive distinct values and all
/// region-to-class maps. Ties keep the smallest thresholds, then the first map.
pub fn fit_threshold_heuristic(values: &[f64], labels: &[usize], n_classes: usize, feature_index: usize) -> Result<ThresholdHeuristic> {
    if values.len() != labels.len() {
        return Err(Error::Table(format!("{} values but {} labels", values.len(), labels.len())));
    }
    if !(2..=3).contains(&n_classes) {
        return Err(Error::InvalidConfig(format!("threshold heuristics need 2 or 3 classes, got {n_classes}")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut uniq: Vec<f64> = Vec::new();
    let mut counts: Vec<[usize; 3]> = Vec::new();
    for &i in &order {
        if uniq.last() != Some(&values[i]) {
            uniq.push(values[i]);
            counts.push([0; 3]);
        }
        counts.last_mut().unwrap()[labels[i]] += 1;
    }
    if uniq.len() < n_classes {
        return Err(Error::TooFewDistinct(uniq.len()));
    }
    // prefix[k] = class counts of the first k distinct values.
    let mut prefix = vec![[0usize; 3]; uniq.len() + 1];
    for k in 0..uniq.len() {
        for c in 0..3 {
            prefix[k + 1][c] = prefix[k][c] + counts[k][c];
        }
    }
    let between = |lo: usize, hi: usize| -> [usize; 3] { [0, 1, 2].map(|c| prefix[hi][c] - prefix[lo][c]) };
    let mid = |i: usize| 0.5 * (uniq[i] + uniq[i + 1]);
    let maps = permutations(n_classes);
    let u = uniq.len();
    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    let mut consider = |score: f64, cuts: Vec<usize>, map: usize| {
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, cuts, map));
        }
    };
    if n_classes == 2 {
        for i in 0..u - 1 {
            let regions = [between(0, i + 1), between(i + 1, u)];
            for (m, map) in maps.iter().enumerate() {
                consider(region_score(&regions, map, 2), vec![i], m);
            }
        }
    } else {
        for i in 0..u - 1 {
            for j in i + 1..u - 1 {
                let regions = [between(0, i + 1), between(i + 1, j + 1), between(j + 1, u)];
                for (m, map) in maps.iter().enumerate() {
                    consider(region_score(&regions, map, 3), vec![i, j], m);
                }
            }
        }
    }
    let (score, cuts, m) = best.expect("at least one candidate");
    Ok(ThresholdHeuristic {
        feature_index,
        thresholds: cuts.into_iter().map(mid).collect(),
        region_map: maps[m].clone(),
        train_score: score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicScore {
    pub per_heuristic: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Macro-F1 of each heuristic on the rows, with mean and population std.
pub fn heuristic_baseline_score(heuristics: &[ThresholdHeuristic], rows: &[Vec<f64>], labels: &[usize]) -> Result<HeuristicScore> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if heuristics.is_empty() {
        return Err(Error::Empty("heuristics"));
    }
    let per: Vec<f64> = heuristics
        .iter()
        .map(|h| {
            let pred: Vec<usize> = rows.iter().map(|r| h.predict(r)).collect();
            macro_f1(labels, &pred, h.n_classes())
        })
        .collect();
    let (mean, std) = mean_std(&per);
    Ok(HeuristicScore {
        per_heuristic: per,
        mean,
        std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpbDecision {
    NotAppropriate,
    AppropriateOrNeeded,
}

impl SpbDecision {
    /// Index in a binary not-appropriate / appropriate-or-needed task.
    pub fn index(self) -> usize {
        match self {
            SpbDecision::NotAppropriate => 0,
            SpbDecision::AppropriateOrNeeded => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpbConfig {
    pub min_speech: f64,
    pub min_pause: f64,
}

impl Default for SpbConfig {
    fn default() -> Self {
        Self {
            min_speech: 60.0,
            min_pause: 2.0,
        }
    }
}

const SPB_EPS: f64 = 1e-9;

/// Topic change once the episode holds enough speech and the group is silent.
pub fn spb_classify(cumulative_speech: f64, trailing_silence: f64, cfg: &SpbConfig) -> SpbDecision {
    if cumulative_speech >= cfg.min_speech - SPB_EPS && trailing_silence >= cfg.min_pause - SPB_EPS {
        SpbDecision::AppropriateOrNeeded
    } else {
        SpbDecision::NotAppropriate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub chosen: Vec<usize>,
    /// Cross-validated macro-F1 after each addition.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub folds: usize,
    pub c: f64,
    /// Stratified subsample bound for the inner cross-validation.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            c: 1.0,
            max_samples: Some(450),
            seed: 0,
        }
    }
}

/// Fold index per sample, stratified by class.
pub fn stratified_folds(y: &[usize], n_classes: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = vec![0; y.len()];
    let mut offset = 0;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        idx.shuffle(rng);
        for (k, i) in idx.into_iter().enumerate() {
            out[i] = (k + offset) % folds;
        }
        offset += 1;
    }
    out
}

fn stratified_subsample(y: &[usize], n_classes: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if y.len() <= max {
        return (0..y.len()).collect();
    }
    let mut keep = Vec::with_capacity(max);
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        let share = ((idx.len() as f64 * max as f64 / y.len() as f64).round() as usize).max(1).min(idx.len());
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..share]);
    }
    keep.sort_unstable();
    keep
}

/// Forward greedy selection scored by k-fold macro-F1 of an RBF SVM with
/// `C` fixed and `gamma = 1 / (|S| var)`. Ties go to the lowest index.
pub fn greedy_select(x: &[Vec<f64>], y: &[usize], n_classes: usize, k: usize, cfg: &SelectionConfig) -> Result<SelectionTrace> {
    let dim = x.first().map_or(0, Vec::len);
    if k > dim {
        return Err(Error::SelectionTooLarge { k, n: dim });
    }
    let mut trace = SelectionTrace {
        chosen: Vec::new(),
        scores: Vec::new(),
    };
    if k == 0 {
        return Ok(trace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keep = match cfg.max_samples {
        Some(m) => stratified_subsample(y, n_classes, m, &mut rng),
        None => (0..y.len()).collect(),
    };
    let xs: Vec<&Vec<f64>> = keep.iter().map(|&i| &x[i]).collect();
    let ys: Vec<usize> = keep.iter().map(|&i| y[i]).collect();
    let n = ys.len();
    let fold = stratified_folds(&ys, n_classes, cfg.folds, &mut rng);
    for f in 0..cfg.folds {
        for c in 0..n_classes {
            if !(0..n).any(|i| fold[i] != f && ys[i] == c) {
                return Err(Error::MissingClass {
                    context: format!("selection fold {f} training part"),
                    class: c.to_string(),
                });
            }
        }
    }
    let params = SvmParams::default();
    let mut dist = vec![0.0; n * n];
    let (mut sum, mut sumsq) = (0.0, 0.0);
    let mut candidate = vec![0.0; n * n];
    let mut kernel = vec![0.0; n * n];
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for f in (0..dim).filter(|f| !trace.chosen.contains(f)) {
            let col: Vec<f64> = xs.iter().map(|r| r[f]).collect();
            for i in 0..n {
                for j in 0..n {
                    let d = col[i] - col[j];
                    candidate[i * n + j] = dist[i * n + j] + d * d;
                }
            }
            let m = (trace.chosen.len() + 1) as f64;
            let count = m * n as f64;
            let s = sum + col.iter().sum::<f64>();
            let ss = sumsq + col.iter().map(|v| v * v).sum::<f64>();
            let var = ss / count - (s / count).powi(2);
            let gamma = if var > 1e-12 { 1.0 / (m * var) } else { 1.0 };
            for (kv, dv) in kernel.iter_mut().zip(&candidate) {
                *kv = (-gamma * dv).exp();
            }
            let mut total = 0.0;
            for fo in 0..cfg.folds {
                let train: Vec<usize> = (0..n).filter(|&i| fold[i] != fo).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold[i] == fo).collect();
                let gram: Vec<f64> = train
                    .iter()
                    .flat_map(|&a| train.iter().map(move |&b| (a, b)))
                    .map(|(a, b)| kernel[a * n + b])
                    .collect();
                let yt: Vec<usize> = train.iter().map(|&i| ys[i]).collect();
                let svm = KernelSvm::fit(&gram, &yt, n_classes, cfg.c, params.tol, params.max_iter)?;
                let pred: Vec<usize> = test
                    .iter()
                    .map(|&q| {
                        let row: Vec<f64> = train.iter().map(|&a| kernel[q * n + a]).collect();
                        svm.predict(&row)
                    })
                    .collect();
                let truth: Vec<usize> = test.iter().map(|&i| ys[i]).collect();
                total += macro_f1(&truth, &pred, n_classes);
            }
            let score = total / cfg.folds as f64;
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, f));
            }
        }
        let (score, f) = best.expect("a candidate remains while k <= dim");
        for i in 0..n {
            for j in 0..n {
                let d = xs[i][f] - xs[j][f];
                dist[i * n + j] += d * d;
            }
        }
        sum += xs.iter().map(|r| r[f]).sum::<f64>();
        sumsq += xs.iter().map(|r| r[f] * r[f]).sum::<f64>();
        trace.chosen.push(f);
        trace.scores.push(score);
    }
    Ok(trace)
}
