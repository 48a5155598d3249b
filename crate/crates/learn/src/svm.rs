//! RBF-kernel support vector classification.
//!
//! The binary machine solves the C-SVC dual
//!
//! ```text
//! min_a  1/2 a'Qa - e'a    s.t.  0 <= a_i <= C,  y'a = 0,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! with sequential minimal optimisation using second-order working set
//! selection. Iteration stops once the maximal KKT violation
//! `m(a) - M(a)` drops below the tolerance. Three or more classes are handled
//! one-vs-rest; the predicted class is the one with the largest decision value.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LearnError, Result};
use crate::tree::check_training_set;

const TAU: f64 = 1e-12;

/// Kernel width. `Scale` resolves to `1 / (n_features * var(X))` at fit time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Scale,
    Value(f64),
}

impl Gamma {
    pub fn resolve(self, x: &[Vec<f64>]) -> f64 {
        match self {
            Gamma::Value(g) => g,
            Gamma::Scale => scale_gamma(x),
        }
    }
}

pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let dim = x.first().map_or(0, Vec::len);
    let count = (x.len() * dim) as f64;
    if count == 0.0 {
        return 1.0;
    }
    let mean = x.iter().flatten().sum::<f64>() / count;
    let var = x.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    if var > 0.0 {
        1.0 / (dim as f64 * var)
    } else {
        1.0
    }
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Scale => s.serialize_str("scale"),
            Gamma::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Gamma::Value(v)),
            Raw::Name(n) if n == "scale" => Ok(Gamma::Scale),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "unknown gamma {n:?}; expected \"scale\" or a number"
            ))),
        }
    }
}

fn default_tol() -> f64 {
    1e-3
}

fn default_max_iter() -> usize {
    10_000_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: Gamma,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: Gamma::Scale,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// Dense row-major RBF Gram matrix.
pub fn rbf_gram(x: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let n = x.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        gram[i * n + i] = 1.0;
        for j in 0..i {
            let k = rbf(&x[i], &x[j], gamma);
            gram[i * n + j] = k;
            gram[j * n + i] = k;
        }
    }
    gram
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    /// Decision offset: `f(x) = sum_i alpha_i y_i K(x_i, x) + bias`.
    pub bias: f64,
    /// Dual objective `1/2 a'Qa - e'a` at the solution.
    pub objective: f64,
    pub iterations: usize,
    pub kkt_gap: f64,
}

/// Solves the binary C-SVC dual for labels `y` in {-1, +1}.
pub fn smo_solve(gram: &[f64], y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<SmoSolution> {
    let n = y.len();
    assert_eq!(gram.len(), n * n, "gram matrix does not match label count");
    if !(c > 0.0) {
        return Err(LearnError::InvalidHyperparameter(format!("C must be positive, got {c}")));
    }
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut iterations = 0;
    let kkt_gap = loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v >= gmax {
                    gmax = v;
                    i_sel = t;
                }
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], y[t]) {
                let yg = y[t] * grad[t];
                if yg >= gmax2 {
                    gmax2 = yg;
                }
                let b = gmax + yg;
                if b > 0.0 && i_sel != usize::MAX {
                    let i = i_sel;
                    let mut a = gram[i * n + i] + gram[t * n + t] - 2.0 * gram[i * n + t];
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let obj = -(b * b) / a;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = t;
                    }
                }
            }
        }
        let gap = gmax + gmax2;
        if gap < tol || i_sel == usize::MAX || j_sel == usize::MAX {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(LearnError::SvmNotConverged {
                iterations,
                gap,
                tol,
                n_samples: n,
                c,
            });
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let d_i = alpha[i] - old_i;
        let d_j = alpha[j] - old_j;
        let (si, sj) = (y[i] * d_i, y[j] * d_j);
        let row_i = &gram[i * n..(i + 1) * n];
        let row_j = &gram[j * n..(j + 1) * n];
        for t in 0..n {
            grad[t] += y[t] * (si * row_i[t] + sj * row_j[t]);
        }
    };

    // Offset from free support vectors, or the midpoint of the feasible range.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            free_sum += yg;
        }
    }
    let rho = if n_free > 0 {
        free_sum / n_free as f64
    } else {
        0.5 * (ub + lb)
    };
    let objective = alpha
        .iter()
        .zip(&grad)
        .map(|(a, g)| a * (g - 1.0))
        .sum::<f64>()
        * 0.5;
    Ok(SmoSolution {
        alpha,
        bias: -rho,
        objective,
        iterations,
        kkt_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    support: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    coef: Vec<f64>,
    bias: f64,
    gamma: f64,
}

impl BinarySvm {
    /// `positive[i]` marks samples of the +1 class.
    pub fn fit(x: &[Vec<f64>], positive: &[bool], params: &SvmParams) -> Result<Self> {
        let gamma = params.gamma.resolve(x);
        let gram = rbf_gram(x, gamma);
        Self::fit_with_gram(x, positive, &gram, gamma, params)
    }

    fn fit_with_gram(
        x: &[Vec<f64>],
        positive: &[bool],
        gram: &[f64],
        gamma: f64,
        params: &SvmParams,
    ) -> Result<Self> {
        let y: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
        let sol = smo_solve(gram, &y, params.c, params.tol, params.max_iter)?;
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for (i, &a) in sol.alpha.iter().enumerate() {
            if a > 0.0 {
                support.push(x[i].clone());
                coef.push(a * y[i]);
            }
        }
        Ok(Self {
            support,
            coef,
            bias: sol.bias,
            gamma,
        })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * rbf(sv, x, self.gamma))
            .sum::<f64>()
            + self.bias
    }

    pub fn n_support(&self) -> usize {
        self.support.len()
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Binary machine (class 1 positive) or one-vs-rest machines for K >= 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svm {
    machines: Vec<BinarySvm>,
    n_classes: usize,
}

impl Svm {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, params: &SvmParams) -> Result<Self> {
        check_training_set(x, y, n_classes)?;
        if n_classes < 2 {
            return Err(LearnError::InvalidHyperparameter(
                "an SVM needs at least two classes".into(),
            ));
        }
        let gamma = params.gamma.resolve(x);
        let gram = rbf_gram(x, gamma);
        let targets: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
        let machines = targets
            .into_iter()
            .map(|k| {
                let positive: Vec<bool> = y.iter().map(|&l| l == k).collect();
                BinarySvm::fit_with_gram(x, &positive, &gram, gamma, params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { machines, n_classes })
    }

    pub fn decision_values(&self, x: &[f64]) -> Vec<f64> {
        self.machines.iter().map(|m| m.decision(x)).collect()
    }

    /// Uncalibrated scores: logistic of the decision value for two classes,
    /// softmax over one-vs-rest decisions otherwise.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let d = self.decision_values(x);
        if self.n_classes == 2 {
            let p = 1.0 / (1.0 + (-d[0]).exp());
            vec![1.0 - p, p]
        } else {
            crate::softmax(&d)
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let d = self.decision_values(x);
        if self.n_classes == 2 {
            usize::from(d[0] > 0.0)
        } else {
            crate::argmax(&d)
        }
    }

    pub fn machines(&self) -> &[BinarySvm] {
        &self.machines
    }
}

/// Machines trained on a precomputed kernel matrix. Prediction takes the
/// kernel values between a query and every training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSvm {
    /// `alpha_i * y_i` per machine over all training samples.
    coef: Vec<Vec<f64>>,
    bias: Vec<f64>,
    n_classes: usize,
}

impl KernelSvm {
    /// `gram` is the row-major `n x n` kernel matrix of the training samples.
    pub fn fit(gram: &[f64], y: &[usize], n_classes: usize, c: f64, tol: f64, max_iter: usize) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(LearnError::EmptyTrainingSet);
        }
        if gram.len() != n * n {
            return Err(LearnError::DimensionMismatch {
                expected: n * n,
                got: gram.len(),
            });
        }
        if n_classes < 2 {
            return Err(LearnError::InvalidHyperparameter(
                "an SVM needs at least two classes".into(),
            ));
        }
        let targets: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
        let mut coef = Vec::with_capacity(targets.len());
        let mut bias = Vec::with_capacity(targets.len());
        for k in targets {
            let yk: Vec<f64> = y.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            if yk.iter().all(|&v| v == yk[0]) {
                // One-sided machine: constant decision.
                coef.push(vec![0.0; n]);
                bias.push(yk[0]);
                continue;
            }
            let sol = smo_solve(gram, &yk, c, tol, max_iter)?;
            coef.push(sol.alpha.iter().zip(&yk).map(|(a, y)| a * y).collect());
            bias.push(sol.bias);
        }
        Ok(Self { coef, bias, n_classes })
    }

    pub fn decision_values(&self, kernel_row: &[f64]) -> Vec<f64> {
        self.coef
            .iter()
            .zip(&self.bias)
            .map(|(c, b)| c.iter().zip(kernel_row).map(|(a, k)| a * k).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, kernel_row: &[f64]) -> usize {
        let d = self.decision_values(kernel_row);
        if self.n_classes == 2 {
            usize::from(d[0] > 0.0)
        } else {
            crate::argmax(&d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_split_at_midpoint() {
        let x = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let params = SvmParams {
            c: 10.0,
            gamma: Gamma::Value(0.5),
            ..Default::default()
        };
        let m = BinarySvm::fit(&x, &[false, true], &params).unwrap();
        assert_eq!(m.n_support(), 2);
        assert!(m.decision(&[1.0, 0.0]).abs() < 1e-9);
        assert!(m.decision(&[1.0, 3.0]).abs() < 1e-9);
        assert!(m.decision(&[0.2, 0.0]) < 0.0);
        assert!(m.decision(&[1.8, 0.0]) > 0.0);
    }

    #[test]
    fn label_swap_negates_decision() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.7).sin(), i as f64 / 6.0]).collect();
        let pos: Vec<bool> = (0..12).map(|i| i % 3 == 0 || i > 8).collect();
        let neg: Vec<bool> = pos.iter().map(|p| !p).collect();
        let params = SvmParams {
            c: 1.0,
            gamma: Gamma::Value(1.0),
            tol: 1e-8,
            ..Default::default()
        };
        let a = BinarySvm::fit(&x, &pos, &params).unwrap();
        let b = BinarySvm::fit(&x, &neg, &params).unwrap();
        for probe in [[0.1, 0.2], [0.9, -1.0], [-0.4, 1.7]] {
            assert!((a.decision(&probe) + b.decision(&probe)).abs() < 1e-6);
        }
    }

    #[test]
    fn iteration_budget_exhaustion_is_an_error() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).cos(), (i as f64 * 1.3).sin()]).collect();
        let pos: Vec<bool> = (0..30).map(|i| i % 2 == 0).collect();
        let params = SvmParams {
            c: 100.0,
            gamma: Gamma::Value(1.0),
            tol: 1e-3,
            max_iter: 2,
        };
        let err = BinarySvm::fit(&x, &pos, &params).unwrap_err();
        assert!(matches!(err, LearnError::SvmNotConverged { iterations: 2, .. }), "{err}");
    }

    #[test]
    fn gamma_serde_accepts_scale_and_numbers() {
        let g: Vec<Gamma> = serde_json::from_str(r#"["scale", 0.1, 1]"#).unwrap();
        assert_eq!(g, vec![Gamma::Scale, Gamma::Value(0.1), Gamma::Value(1.0)]);
        assert_eq!(serde_json::to_string(&g).unwrap(), r#"["scale",0.1,1.0]"#);
    }

    #[test]
    fn precomputed_kernel_matches_feature_space_fit() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let params = SvmParams {
            gamma: Gamma::Value(0.8),
            ..Default::default()
        };
        let svm = Svm::fit(&x, &y, 3, &params).unwrap();
        let gram = rbf_gram(&x, 0.8);
        let k = KernelSvm::fit(&gram, &y, 3, params.c, params.tol, params.max_iter).unwrap();
        for q in &x {
            let row: Vec<f64> = x.iter().map(|xi| rbf(xi, q, 0.8)).collect();
            let a = svm.decision_values(q);
            let b = k.decision_values(&row);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
