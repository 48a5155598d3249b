//! Classification scores.
//!
//! F1 follows the zero-division-as-zero convention: a class that is never
//! predicted, or never present, contributes an F1 of 0 unless both the
//! prediction and the truth are empty for it, in which case it also scores 0.
//! Macro averages are taken over the full class set of the task, not only the
//! classes that occur in the evaluated labels.

/// `matrix[truth][pred]` counts.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    let mut matrix = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        matrix[t][p] += 1;
    }
    matrix
}

/// F1 of one class from its true positives, prediction count and support.
pub fn f1_from_counts(tp: usize, predicted: usize, actual: usize) -> f64 {
    if predicted == 0 || actual == 0 || tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / actual as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn f1_from_confusion(matrix: &[Vec<usize>]) -> Vec<f64> {
    let n = matrix.len();
    (0..n)
        .map(|k| {
            let predicted: usize = (0..n).map(|t| matrix[t][k]).sum();
            let actual: usize = matrix[k].iter().sum();
            f1_from_counts(matrix[k][k], predicted, actual)
        })
        .collect()
}

pub fn f1_per_class(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<f64> {
    f1_from_confusion(&confusion_matrix(truth, pred, n_classes))
}

pub fn macro_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let scores = f1_per_class(truth, pred, n_classes);
    scores.iter().sum::<f64>() / n_classes as f64
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    hits as f64 / truth.len() as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let y = [0, 1, 2, 0, 1, 2];
        assert_eq!(macro_f1(&y, &y, 3), 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_three_classes() {
        // Only the predicted class scores: p = 1/3, r = 1, F1 = 0.5; macro = 1/6.
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [1; 6];
        let f1 = f1_per_class(&truth, &pred, 3);
        assert_eq!(f1[0], 0.0);
        assert!((f1[1] - 0.5).abs() < 1e-12);
        assert!((macro_f1(&truth, &pred, 3) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert!(mean_std(&[0.7; 3]).1 < 1e-15);
    }
}
