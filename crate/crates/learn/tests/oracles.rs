//! Small-instance reference solutions for the tree and SVM trainers.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topic_learn::svm::{rbf_gram, smo_solve, Gamma, Svm, SvmParams};
use topic_learn::tree::{gini, DecisionTree, Node, TreeParams};

/// Every midpoint between consecutive distinct values, scored from scratch.
fn brute_force_split(x: &[f64], y: &[usize], n_classes: usize) -> Option<(f64, f64)> {
    let mut values = x.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut best: Option<(f64, f64)> = None;
    for w in values.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let mut left = vec![0; n_classes];
        let mut right = vec![0; n_classes];
        for (v, &l) in x.iter().zip(y) {
            if *v <= t {
                left[l] += 1;
            } else {
                right[l] += 1;
            }
        }
        let nl: usize = left.iter().sum();
        let nr: usize = right.iter().sum();
        let score = (nl as f64 * gini(&left) + nr as f64 * gini(&right)) / x.len() as f64;
        if best.map_or(true, |(_, s)| score < s - 1e-12) {
            best = Some((t, score));
        }
    }
    best
}

#[test]
fn tree_root_matches_brute_force_on_random_1d_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..50 {
        let n = rng.gen_range(8..40);
        let x: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..10.0f64) * 4.0).round() / 4.0).collect();
        let y: Vec<usize> = x
            .iter()
            .map(|v| if rng.gen_bool(0.8) { usize::from(*v > 5.0) } else { rng.gen_range(0..3) })
            .collect();
        let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
        let tree = DecisionTree::fit(&rows, &y, 3, TreeParams { max_depth: 1, min_samples_split: 2 }).unwrap();
        let parent = {
            let mut c = vec![0; 3];
            y.iter().for_each(|&l| c[l] += 1);
            gini(&c)
        };
        match (tree.root(), brute_force_split(&x, &y, 3)) {
            (Node::Split { threshold, .. }, Some((t, score))) => {
                assert!(score < parent);
                assert!((threshold - t).abs() < 1e-12, "tree {threshold} oracle {t}");
            }
            (Node::Leaf { .. }, best) => {
                assert!(best.map_or(true, |(_, s)| s >= parent - 1e-12));
            }
            (root, oracle) => panic!("tree root {root:?} vs oracle {oracle:?}"),
        }
    }
}

/// Dual objective `1/2 a'Qa - 1'a` minimised by accelerated projected
/// gradient onto `{0 <= a <= C, y'a = 0}`.
fn dense_dual_oracle(gram: &[f64], y: &[f64], c: f64) -> f64 {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * gram[i * n + j];
    let objective = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += 0.5 * a[i] * a[j] * q(i, j);
            }
            s -= a[i];
        }
        s
    };
    // Lipschitz bound: Gershgorin.
    let l = (0..n).map(|i| (0..n).map(|j| q(i, j).abs()).sum::<f64>()).fold(0.0, f64::max);
    let project = |v: &[f64]| -> Vec<f64> {
        let at = |lambda: f64| -> Vec<f64> { v.iter().zip(y).map(|(vi, yi)| (vi - lambda * yi).clamp(0.0, c)).collect() };
        let balance = |a: &[f64]| a.iter().zip(y).map(|(ai, yi)| ai * yi).sum::<f64>();
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if balance(&at(mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    };
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q(i, j) * z[j]).sum::<f64>() - 1.0).collect();
        let step: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| zi - gi / l).collect();
        let next = project(&step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = next.iter().zip(&a).map(|(n, p)| n + (t - 1.0) / t_next * (n - p)).collect();
        a = next;
        t = t_next;
    }
    objective(&a)
}

#[test]
fn smo_dual_objective_matches_dense_qp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let x: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| if r[0] + 0.5 * r[1] + rng.gen_range(-0.7..0.7) > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let c = [0.1, 1.0, 10.0][trial % 3];
        let gram = rbf_gram(&x, 0.5);
        let smo = smo_solve(&gram, &y, c, 1e-6, 1_000_000).unwrap();
        let oracle = dense_dual_oracle(&gram, &y, c);
        assert!((smo.objective - oracle).abs() < 1e-3, "C={c}: smo {} oracle {oracle}", smo.objective);
    }
}

#[test]
fn vanishing_gamma_degrades_toward_majority() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..60 {
        let class = usize::from(i < 20);
        let centre = if class == 1 { 2.0 } else { -2.0 };
        x.push(vec![centre + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        y.push(class);
    }
    let acc = |gamma: f64| {
        let p = SvmParams { c: 1.0, gamma: Gamma::Value(gamma), ..Default::default() };
        let m = Svm::fit(&x, &y, 2, &p).unwrap();
        let pred: Vec<usize> = x.iter().map(|r| m.predict(r)).collect();
        topic_learn::metrics::accuracy(&y, &pred)
    };
    assert_eq!(acc(0.5), 1.0);
    let flat = acc(1e-7);
    assert!((flat - 40.0 / 60.0).abs() < 1e-9, "accuracy with flat kernel {flat}");
}

fn transform(v: f64) -> f64 {
    (v * 0.7).exp() + v * v * v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tree_invariant_under_monotone_transform(
        rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0usize..3), 10..40),
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
        let y: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let xt: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| transform(*v)).collect()).collect();
        let p = TreeParams { max_depth: 4, min_samples_split: 2 };
        let a = DecisionTree::fit(&x, &y, 3, p).unwrap();
        let b = DecisionTree::fit(&xt, &y, 3, p).unwrap();
        // Training points only: thresholds between samples move nonlinearly
        // under the transform.
        for r in &x {
            let rt: Vec<f64> = r.iter().map(|v| transform(*v)).collect();
            prop_assert_eq!(a.predict(r), b.predict(&rt));
        }
    }

    #[test]
    fn svm_label_swap_negates_decision(
        rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 6..20),
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
        let mut y: Vec<usize> = x.iter().map(|r| usize::from(r[0] > r[1])).collect();
        y[0] = 0;
        y[1] = 1;
        let swapped: Vec<usize> = y.iter().map(|l| 1 - l).collect();
        let p = SvmParams { c: 1.0, gamma: Gamma::Value(0.5), tol: 1e-6, ..Default::default() };
        let a = Svm::fit(&x, &y, 2, &p).unwrap();
        let b = Svm::fit(&x, &swapped, 2, &p).unwrap();
        for r in &x {
            let (da, db) = (a.decision_values(r)[0], b.decision_values(r)[0]);
            prop_assert!((da + db).abs() < 1e-4, "{} vs {}", da, db);
        }
    }
}
