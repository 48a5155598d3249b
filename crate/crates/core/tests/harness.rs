use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topic_learn::tree::TreeParams;
use topic_learn::{Family, Hyperparameters, ModelSpec};
use topic_turn::dataset::{corpus_specs, generate_synthetic_session, DecisionLabel};
use topic_turn::featurize::{extract_session, manifest_hash, Dataset, ExtractorConfig};
use topic_turn::harness::{
    grid_search_cv, run_experiment, EvalTask, ExperimentConfig, Grids, Pipeline, TaskData, TaskKind,
};

fn corpus(total: usize, sessions: usize, seed: u64) -> Dataset {
    let cfg = ExtractorConfig::default();
    let mut examples = Vec::new();
    for (i, spec) in corpus_specs(total, sessions, true).iter().enumerate() {
        let (session, records) = generate_synthetic_session(spec, seed + i as u64).unwrap();
        examples.extend(extract_session(&session, &records, &cfg, true).unwrap());
    }
    Dataset {
        manifest_hash: manifest_hash(&cfg),
        examples,
    }
}

fn small_grids() -> Grids {
    let mut g = Grids::default();
    g.dt.max_depth = vec![5];
    g.dt.min_samples_split = vec![2];
    g.rf.n_estimators = vec![30];
    g.rf.max_depth = vec![10];
    g.svm.c = vec![10.0];
    g.svm.gamma.truncate(1);
    g.mlp.hidden_layers = vec![vec![32]];
    g.mlp.batch_size = vec![16];
    g.rnn.hidden = vec![16];
    g.rnn.batch_size = vec![16];
    g.schedule.max_epochs = 60;
    g
}

#[test]
fn two_step_experiment_on_separable_corpus() {
    let ds = corpus(360, 4, 5);
    let cfg = ExperimentConfig {
        families: vec![Family::Rf, Family::Gru],
        grids: small_grids(),
        seed: 2,
        ..Default::default()
    };
    let res = run_experiment(&ds, &cfg).unwrap();
    let held: BTreeSet<_> = res.split.evaluation_ids();
    assert!(res.provenance.iter().all(|p| p.ids.is_disjoint(&held)));
    for task in [EvalTask::BinaryNaVsAn, EvalTask::BinaryAVsN, EvalTask::Composed] {
        for m in ["rf", "gru"] {
            let r = res.report(task, m, "test").unwrap();
            assert!(r.scores.macro_f1 >= 0.9, "{} {m}: {}", task.name(), r.scores.macro_f1);
            assert_eq!(r.scores.per_model.len(), 5);
        }
    }
    assert!(res.report(EvalTask::BinaryNaVsAn, "spb", "test").is_some());
    assert!(res.report(EvalTask::BinaryAVsN, "heuristic", "holdout").is_some());

    let dir = tempfile::tempdir().unwrap();
    let pipe = res.pipeline.as_ref().unwrap();
    pipe.save(dir.path()).unwrap();
    let back = Pipeline::load(dir.path()).unwrap();
    let ex = &ds.examples[0];
    let key = ex.meta.participant_key();
    assert_eq!(
        pipe.predict(&key, &ex.vector, ex.sequence.as_ref()).unwrap(),
        back.predict(&key, &ex.vector, ex.sequence.as_ref()).unwrap()
    );
}

#[test]
fn experiment_is_deterministic() {
    let ds = corpus(200, 3, 8);
    let cfg = ExperimentConfig {
        task: TaskKind::Multiclass,
        families: vec![Family::Dt],
        grids: small_grids(),
        ..Default::default()
    };
    let a = run_experiment(&ds, &cfg).unwrap();
    let b = run_experiment(&ds, &cfg).unwrap();
    assert_eq!(a.split, b.split);
    assert_eq!(a.reports, b.reports);
}

#[test]
fn sequential_family_without_sequences_is_rejected() {
    let mut ds = corpus(80, 2, 1);
    for e in &mut ds.examples {
        e.sequence = None;
    }
    let cfg = ExperimentConfig {
        families: vec![Family::Lstm],
        ..Default::default()
    };
    assert!(run_experiment(&ds, &cfg).is_err());
}

fn tree(depth: usize) -> ModelSpec {
    ModelSpec {
        family: Family::Dt,
        hyperparameters: Hyperparameters::Tree(TreeParams {
            max_depth: depth,
            min_samples_split: 2,
        }),
        seed: 0,
    }
}

#[test]
fn grid_of_one_returns_that_cell_and_five_models() {
    let data = TaskData {
        vectors: (0..40).map(|i| vec![i as f64]).collect(),
        sequences: None,
        labels: (0..40).map(|i| usize::from(i >= 20)).collect(),
    };
    let g = grid_search_cv(&[tree(2)], &data, 2, 5, "h", 0).unwrap();
    assert_eq!(g.best, tree(2));
    assert_eq!(g.models.len(), 5);
}

#[test]
fn shallow_tree_wins_when_deep_trees_fit_noise() {
    // Class follows x0 > 0 with 20 % flipped labels; x1..x4 are noise.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..300 {
        let row: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clean = usize::from(row[0] > 0.0);
        labels.push(if rng.gen_bool(0.2) { 1 - clean } else { clean });
        vectors.push(row);
    }
    let data = TaskData {
        vectors,
        sequences: None,
        labels,
    };
    let g = grid_search_cv(&[tree(20), tree(1)], &data, 2, 5, "h", 0).unwrap();
    assert_eq!(g.best, tree(1));
    assert!(g.cell_scores[1] > g.cell_scores[0]);
}

#[test]
fn stage_labels_partition_the_classes() {
    for l in DecisionLabel::ALL {
        let s1 = EvalTask::BinaryNaVsAn.class_of(l).unwrap();
        let s2 = EvalTask::BinaryAVsN.class_of(l);
        assert_eq!(s1 == 0, s2.is_none());
        if let Some(s2) = s2 {
            assert_eq!(topic_turn::harness::compose(s1, s2), l.index());
        }
    }
}
